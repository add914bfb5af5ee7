#pragma once

// Computable pieces of the generalization bound for pruning a one-hidden-layer
// network f(x) = u^T g(W^T x + b) by an ID. Suprema over the input domain
// are replaced by maxima over the supplied sample, and the pseudo-dimension
// constant zeta is a user parameter; the result is a report, not a
// certificate.

#include <algorithm>
#include <cmath>
#include <numbers>

#include <json.hpp>

#include "idprune/error.hpp"
#include "idprune/linalg.hpp"
#include "idprune/nn.hpp"

namespace idprune {

// Mean squared output gap ||f(x) - f_pruned(x)||^2 over the samples.
inline double empirical_id_risk(const Model& full, const Model& pruned, const Tensor& x) {
    const Tensor a = forward(full, x);
    const Tensor b = forward(pruned, x);
    if (a.shape() != b.shape())
        throw ShapeError("empirical_id_risk: outputs " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(x.batch());
}

// eps^2 ||u||^2 ||Z||_2^2 / n with Z the n x m hidden activations.
// ||u|| is the spectral norm for a single output. With c > 1 outputs the
// spectral norm no longer bounds ||(Z - Z_I T) u||_F, so the Frobenius norm
// of u is used instead; the two agree when c = 1.
inline double lemma2_bound(double epsilon, const Matrix& u, const Matrix& z, std::size_t n) {
    if (n == 0) throw InvalidInput("lemma2_bound: n must be positive");
    if (!(epsilon >= 0.0)) throw InvalidInput("lemma2_bound: epsilon must be >= 0");
    const double un = u.frobenius_norm();
    const double zn = z.empty() ? 0.0 : spectral_norm(z, 1e-12, 10000);
    return epsilon * epsilon * un * un * zn * zn / static_cast<double>(n);
}

// ||u||_2^2 * z_sup * (1 + ||T||_2)^2, z_sup = max_i ||g(W^T x_i)||^2.
inline double eta_bound(const Matrix& u, double z_sup, double t_norm) {
    const double un = u.empty() ? 0.0 : exact_spectral_norm(u);
    return un * un * z_sup * (1.0 + t_norm) * (1.0 + t_norm);
}

struct BoundInputs {
    double epsilon = 0.0;
    double delta = 0.05;
    double zeta = 1.0;  // uncalibrated
    double r0 = 0.0;    // risk of the full model, estimated by the caller
    double t_norm = 1.0;
};

struct BoundReport {
    std::size_t n = 0;
    std::size_t d = 0;
    std::size_t m = 0;
    double epsilon = 0.0;
    double delta = 0.0;
    double zeta = 0.0;
    double r0 = 0.0;
    double empirical_id_risk = 0.0;
    double lemma2_bound = 0.0;
    double z_sup = 0.0;
    double m_constant = 0.0;  // sample-sup
    double t_norm = 0.0;
    double eta = 0.0;
    double pseudo_dimension = 0.0;
    // False when n <= p; log(en/p) is then clamped at 0 and the slack
    // understates the VC-type term.
    bool slack_regime_valid = false;
    double lemma1_slack = 0.0;
    double lemma1_bound = 0.0;    // empirical risk + slack
    double rid_bound = 0.0;       // eps^2 M + slack
    double theorem1_bound = 0.0;  // rid + r0 + 2 sqrt(rid r0)

    nlohmann::json to_json() const {
        return {{"n", n},
                {"d", d},
                {"m", m},
                {"epsilon", epsilon},
                {"delta", delta},
                {"zeta", zeta},
                {"zeta_calibrated", false},
                {"r0", r0},
                {"empirical_id_risk", empirical_id_risk},
                {"lemma2_bound", lemma2_bound},
                {"z_sup", z_sup},
                {"m_constant", m_constant},
                {"sup_estimate", "sample-sup"},
                {"t_norm", t_norm},
                {"eta", eta},
                {"pseudo_dimension", pseudo_dimension},
                {"slack_regime_valid", slack_regime_valid},
                {"lemma1_slack", lemma1_slack},
                {"lemma1_bound", lemma1_bound},
                {"rid_bound", rid_bound},
                {"theorem1_bound", theorem1_bound}};
    }
};

// M (1 + ||T||)^2 n^{-1/2} (sqrt(2 p log(e n / p)) + sqrt(log(1/delta) / 2)).
inline double lemma1_slack(double m_constant, double t_norm, std::size_t n, double p, double delta,
                           bool* regime_valid = nullptr) {
    if (!(delta > 0.0 && delta < 1.0)) throw InvalidInput("delta must lie in (0, 1)");
    if (!(p > 0.0)) throw InvalidInput("pseudo-dimension must be positive");
    if (n == 0) throw InvalidInput("n must be positive");
    const double nn = static_cast<double>(n);
    const double log_term = std::log(std::numbers::e * nn / p);
    if (regime_valid) *regime_valid = nn > p;
    const double vc = std::sqrt(2.0 * p * std::max(log_term, 0.0));
    const double conf = std::sqrt(std::log(1.0 / delta) / 2.0);
    return m_constant * (1.0 + t_norm) * (1.0 + t_norm) / std::sqrt(nn) * (vc + conf);
}

namespace detail {

struct OneHidden {
    const FullyConnected* w;
    const FullyConnected* u;
};

inline OneHidden one_hidden_parts(const Model& model) {
    validate_model(model);
    if (model.layers.size() != 3 || !std::holds_alternative<FullyConnected>(model.layers[0]) ||
        !is_channelwise(model.layers[1]) || !std::holds_alternative<FullyConnected>(model.layers[2]))
        throw StructuralError("bound report needs a fully connected / activation / fully connected model");
    return {&std::get<FullyConnected>(model.layers[0]), &std::get<FullyConnected>(model.layers[2])};
}

}  // namespace detail

// Assembles every quantity for a one-hidden-layer model and its pruned
// version on the samples x.
inline BoundReport theorem1_report(const Model& full, const Model& pruned, const Tensor& x, const BoundInputs& in) {
    if (!(in.zeta > 0.0)) throw InvalidInput("zeta must be positive");
    if (!(in.delta > 0.0 && in.delta < 1.0)) throw InvalidInput("delta must lie in (0, 1)");
    if (!(in.epsilon >= 0.0)) throw InvalidInput("epsilon must be >= 0");
    if (!(in.r0 >= 0.0)) throw InvalidInput("r0 must be >= 0");
    if (!(in.t_norm >= 0.0)) throw InvalidInput("t_norm must be >= 0");
    const auto parts = detail::one_hidden_parts(full);
    detail::one_hidden_parts(pruned);

    BoundReport r;
    r.n = x.batch();
    r.d = parts.w->in_features();
    r.m = parts.w->out_features();
    r.epsilon = in.epsilon;
    r.delta = in.delta;
    r.zeta = in.zeta;
    r.r0 = in.r0;
    r.t_norm = in.t_norm;

    const Matrix z = forward_prefix(full, x, 1).as_matrix();
    r.empirical_id_risk = empirical_id_risk(full, pruned, x);
    r.lemma2_bound = lemma2_bound(in.epsilon, parts.u->weight, z, r.n);
    for (std::size_t i = 0; i < z.rows(); ++i) {
        double s = 0.0;
        for (double v : z.row(i)) s += v * v;
        r.z_sup = std::max(r.z_sup, s);
    }
    const double un = exact_spectral_norm(parts.u->weight);
    r.m_constant = un * un * r.z_sup;
    r.eta = eta_bound(parts.u->weight, r.z_sup, in.t_norm);

    const double dm = static_cast<double>(r.d * r.m);
    r.pseudo_dimension = in.zeta * dm * std::log(std::max(dm, 2.0));
    r.lemma1_slack = lemma1_slack(r.m_constant, in.t_norm, r.n, r.pseudo_dimension, in.delta, &r.slack_regime_valid);
    r.lemma1_bound = r.empirical_id_risk + r.lemma1_slack;
    r.rid_bound = in.epsilon * in.epsilon * r.m_constant + r.lemma1_slack;
    r.theorem1_bound = r.rid_bound + in.r0 + 2.0 * std::sqrt(r.rid_bound * in.r0);
    return r;
}

}  // namespace idprune
