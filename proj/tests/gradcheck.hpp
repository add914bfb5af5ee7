#pragma once

// Central finite-difference check of compute_gradients, shared by the unit
// and acceptance suites.

#include <algorithm>
#include <cmath>
#include <string>

#include "idprune/training.hpp"

namespace idprune::testing {

struct GradCheckResult {
    double worst_rel = 0.0;
    std::string worst_where;
    std::size_t checked = 0;
};

inline double rel_diff(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-7});
}

inline void note(GradCheckResult& r, double rel, const std::string& where) {
    ++r.checked;
    if (rel > r.worst_rel) {
        r.worst_rel = rel;
        r.worst_where = where;
    }
}

// Compares every parameter gradient and the input gradient with
// (f(p + h) - f(p - h)) / 2h.
inline GradCheckResult gradient_check(const Model& model, const Tensor& x, const TargetView& t, Loss loss,
                                      double h = 1e-5) {
    const Gradients g = compute_gradients(model, x, t, loss);
    GradCheckResult r;
    Model probe = model;
    auto loss_at = [&]() { return compute_gradients(probe, x, t, loss).loss; };
    for (std::size_t i = 0; i < probe.layers.size(); ++i) {
        for (int which = 0; which < 2; ++which) {
            auto params = which == 0 ? weight_values(probe.layers[i]) : bias_values(probe.layers[i]);
            const auto& analytic = which == 0 ? g.layers[i].weight : g.layers[i].bias;
            for (std::size_t j = 0; j < params.size(); ++j) {
                const double keep = params[j];
                params[j] = keep + h;
                const double up = loss_at();
                params[j] = keep - h;
                const double down = loss_at();
                params[j] = keep;
                note(r, rel_diff(analytic[j], (up - down) / (2 * h)),
                     "layer " + std::to_string(i) + (which == 0 ? " weight[" : " bias[") + std::to_string(j) + "]");
            }
        }
    }
    Tensor xp = x;
    for (std::size_t j = 0; j < xp.size(); ++j) {
        const double keep = xp[j];
        xp[j] = keep + h;
        const double up = compute_gradients(model, xp, t, loss).loss;
        xp[j] = keep - h;
        const double down = compute_gradients(model, xp, t, loss).loss;
        xp[j] = keep;
        note(r, rel_diff(g.input[j], (up - down) / (2 * h)), "input[" + std::to_string(j) + "]");
    }
    return r;
}

}  // namespace idprune::testing
