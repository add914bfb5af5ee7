#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "idprune/pruning.hpp"
#include "idprune/theory.hpp"
#include "oracles.hpp"

using namespace idprune;
using namespace idprune::testing;

namespace {

PruneConfig eps_config(double eps) {
    PruneConfig c;
    c.mode = PruneConfig::Mode::epsilon;
    c.epsilon = eps;
    c.certify = true;
    return c;
}

// Per-sample ||f(x_i) - f_pruned(x_i)||^2, computed through Eigen.
Eigen::VectorXd per_sample_gap(const Model& a, const Model& b, const Tensor& x) {
    const Eigen::MatrixXd fa = to_eigen(forward(a, x).as_matrix());
    const Eigen::MatrixXd fb = to_eigen(forward(b, x).as_matrix());
    return (fa - fb).rowwise().squaredNorm();
}

}  // namespace

TEST(EmpiricalRisk, ZeroForIdenticalModels) {
    Rng rng(1);
    const Model m = one_hidden_fixture(rng, 4, 10, 1);
    const Tensor x = random_input(m, 50, rng);
    EXPECT_EQ(empirical_id_risk(m, m, x), 0.0);
}

TEST(EmpiricalRisk, MatchesEigenMean) {
    Rng rng(2);
    const Model m = one_hidden_fixture(rng, 4, 10, 3);
    const Tensor x = random_input(m, 40, rng);
    PruneConfig c;
    c.fraction = 0.6;
    const Model p = prune_model(m, PruningSet{x}, c).model;
    EXPECT_NEAR(empirical_id_risk(m, p, x), per_sample_gap(m, p, x).mean(), 1e-12);
}

TEST(EmpiricalRisk, FullRankPruneIsExact) {
    Rng rng(3);
    const Model m = one_hidden_fixture(rng, 5, 8, 2);
    const Tensor x = random_input(m, 60, rng);
    PruneConfig c;
    c.fraction = 0.0;
    const Model p = prune_model(m, PruningSet{x}, c).model;
    EXPECT_LE(empirical_id_risk(m, p, x), 1e-18);
}

TEST(SecondLayerBound, HandValue) {
    // u = [3; 4], Z = diag(2, 1) padded to 3 rows: ||u|| = 5, ||Z|| = 2.
    Matrix u(2, 1);
    u(0, 0) = 3;
    u(1, 0) = 4;
    Matrix z(3, 2);
    z(0, 0) = 2;
    z(1, 1) = 1;
    EXPECT_NEAR(lemma2_bound(0.1, u, z, 3), 0.01 * 25 * 4 / 3.0, 1e-9);
    EXPECT_EQ(lemma2_bound(0.0, u, z, 3), 0.0);
    EXPECT_THROW(lemma2_bound(0.1, u, z, 0), InvalidInput);
}

TEST(SecondLayerBound, BoundsEmpiricalRiskOnRandomNets) {
    for (std::uint64_t seed = 10; seed < 20; ++seed) {
        Rng rng(seed);
        const std::size_t outputs = 1 + seed % 3;
        const Model m = one_hidden_fixture(rng, 3 + seed % 4, 12 + seed % 7, outputs);
        const Tensor x = random_input(m, 80, rng);
        for (double eps : {0.05, 0.2, 0.5}) {
            const auto r = prune_model(m, PruningSet{x}, eps_config(eps));
            const Matrix z = forward_prefix(m, x, 1).as_matrix();
            const double bound = lemma2_bound(eps, std::get<FullyConnected>(m.layers[2]).weight, z, x.batch());
            EXPECT_LE(empirical_id_risk(m, r.model, x), bound * (1 + 1e-9) + 1e-15)
                << "seed " << seed << " eps " << eps;
        }
    }
}

TEST(SupLossBound, HandValueAndScaling) {
    Matrix u(1, 1);
    u(0, 0) = 2;
    EXPECT_NEAR(eta_bound(u, 3.0, 1.0), 4 * 3 * 4, 1e-12);
    EXPECT_NEAR(eta_bound(u, 3.0, 0.0), 12, 1e-12);
    Matrix u3 = u;
    u3(0, 0) = 6;
    EXPECT_NEAR(eta_bound(u3, 3.0, 0.5) / eta_bound(u, 3.0, 0.5), 9.0, 1e-12);
}

TEST(SupLossBound, DominatesPerSampleLoss) {
    for (std::uint64_t seed = 30; seed < 36; ++seed) {
        Rng rng(seed);
        Model m = one_hidden_fixture(rng, 4, 15, 1);
        std::get<FullyConnected>(m.layers[2]).bias = {0.0};
        const Tensor x = random_input(m, 100, rng);
        PruneConfig c;
        c.fraction = 0.5;
        const auto r = prune_model(m, PruningSet{x}, c);
        const double t_norm = r.report.layers.front().t_norm;
        BoundInputs in;
        in.t_norm = t_norm;
        const BoundReport b = theorem1_report(m, r.model, x, in);
        EXPECT_LE(per_sample_gap(m, r.model, x).maxCoeff(), b.eta * (1 + 1e-9)) << "seed " << seed;
    }
}

TEST(ConcentrationSlack, HandValue) {
    bool valid = false;
    const double n = 1000, p = 10, delta = 0.1;
    const double expect =
        2.0 * 4.0 / std::sqrt(n) * (std::sqrt(2 * p * std::log(std::exp(1.0) * n / p)) + std::sqrt(std::log(10.0) / 2));
    EXPECT_NEAR(lemma1_slack(2.0, 1.0, 1000, p, delta, &valid), expect, 1e-12);
    EXPECT_TRUE(valid);
}

TEST(ConcentrationSlack, DecreasesWithSampleSize) {
    double prev = lemma1_slack(1.0, 0.5, 100, 20, 0.05);
    for (std::size_t n = 200; n <= 100000; n *= 2) {
        const double s = lemma1_slack(1.0, 0.5, n, 20, 0.05);
        EXPECT_LT(s, prev) << n;
        prev = s;
    }
}

TEST(ConcentrationSlack, FlagsSmallSampleRegime) {
    bool valid = true;
    const double s = lemma1_slack(1.0, 1.0, 5, 50, 0.05, &valid);
    EXPECT_FALSE(valid);
    EXPECT_TRUE(std::isfinite(s));
    EXPECT_GT(s, 0.0);
}

TEST(ConcentrationSlack, RejectsBadArguments) {
    EXPECT_THROW(lemma1_slack(1, 1, 10, 1, 0.0), InvalidInput);
    EXPECT_THROW(lemma1_slack(1, 1, 10, 1, 1.0), InvalidInput);
    EXPECT_THROW(lemma1_slack(1, 1, 10, 0, 0.5), InvalidInput);
    EXPECT_THROW(lemma1_slack(1, 1, 0, 1, 0.5), InvalidInput);
}

TEST(RiskBound, AssemblesBoundsConsistently) {
    Rng rng(40);
    const Model m = one_hidden_fixture(rng, 3, 10, 1);
    const Tensor x = random_input(m, 200, rng);
    const auto r = prune_model(m, PruningSet{x}, eps_config(0.1));
    BoundInputs in;
    in.epsilon = 0.1;
    in.r0 = 0.04;
    in.t_norm = r.report.layers.front().t_norm;
    const BoundReport b = theorem1_report(m, r.model, x, in);
    EXPECT_EQ(b.n, 200u);
    EXPECT_EQ(b.d, 3u);
    EXPECT_EQ(b.m, 10u);
    EXPECT_NEAR(b.pseudo_dimension, 30 * std::log(30.0), 1e-9);
    EXPECT_NEAR(b.eta, b.m_constant * (1 + in.t_norm) * (1 + in.t_norm), 1e-9 * b.eta);
    EXPECT_NEAR(b.rid_bound, 0.01 * b.m_constant + b.lemma1_slack, 1e-12);
    EXPECT_NEAR(b.theorem1_bound, b.rid_bound + 0.04 + 2 * std::sqrt(b.rid_bound * 0.04), 1e-12);
    EXPECT_LE(b.empirical_id_risk, b.lemma2_bound * (1 + 1e-9));
    EXPECT_GE(b.theorem1_bound, b.rid_bound);

    const auto j = b.to_json();
    EXPECT_EQ(j.at("sup_estimate"), "sample-sup");
    EXPECT_EQ(j.at("zeta_calibrated"), false);
    EXPECT_EQ(j.at("n"), 200);
}

TEST(RiskBound, MonotoneInEpsilon) {
    Rng rng(41);
    const Model m = one_hidden_fixture(rng, 2, 6, 1);
    const Tensor x = random_input(m, 400, rng);
    BoundInputs in;
    double prev = -1;
    for (double eps : {0.0, 0.1, 0.3, 0.6}) {
        in.epsilon = eps;
        const double b = theorem1_report(m, m, x, in).rid_bound;
        EXPECT_GT(b, prev);
        prev = b;
    }
}

TEST(RiskBound, RejectsInvalidInputs) {
    Rng rng(42);
    const Model m = one_hidden_fixture(rng, 2, 4, 1);
    const Tensor x = random_input(m, 20, rng);
    BoundInputs in;
    in.delta = 1.5;
    EXPECT_THROW(theorem1_report(m, m, x, in), InvalidInput);
    in = {};
    in.zeta = 0.0;
    EXPECT_THROW(theorem1_report(m, m, x, in), InvalidInput);
    in = {};
    in.r0 = -1;
    EXPECT_THROW(theorem1_report(m, m, x, in), InvalidInput);
    Rng r2(1);
    const Model deep = fc_fixture(r2);
    EXPECT_THROW(theorem1_report(deep, deep, random_input(deep, 4, r2), BoundInputs{}), StructuralError);
}
