#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "idprune/linalg.hpp"
#include "oracles.hpp"

using namespace idprune;
using idprune::testing::geometric_spectrum;
using idprune::testing::random_gaussian;
using idprune::testing::random_with_spectrum;
using idprune::testing::spectral_oracle;
using idprune::testing::svd_oracle;

namespace {

Matrix permuted_columns(const Matrix& a, const std::vector<std::size_t>& perm) {
    return a.select_columns(perm);
}

void expect_diag_non_increasing(const PivotedQR& qr) {
    for (std::size_t i = 1; i < qr.steps; ++i)
        EXPECT_LE(std::abs(qr.diag(i)), std::abs(qr.diag(i - 1))) << "at step " << i;
}

}  // namespace

TEST(ColumnPivotedQr, IdentityHasUnitDiagonal) {
    const Matrix a = Matrix::identity(3);
    const PivotedQR qr = column_pivoted_qr(a, 3, true);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(std::abs(qr.diag(i)), 1.0);
    // Ties go to the lowest original index.
    EXPECT_EQ(qr.perm, (std::vector<std::size_t>{0, 1, 2}));
    EXPECT_EQ((matmul(qr.q, qr.r) - permuted_columns(a, qr.perm)).max_abs(), 0.0);
}

TEST(ColumnPivotedQr, DependentColumnsPivotLargerFirst) {
    const Matrix a{{1, 2}, {2, 4}};
    const PivotedQR qr = column_pivoted_qr(a, 2);
    EXPECT_EQ(qr.perm, (std::vector<std::size_t>{1, 0}));
    EXPECT_NEAR(std::abs(qr.diag(0)), std::sqrt(20.0), 1e-14);
    EXPECT_LE(std::abs(qr.diag(1)), 1e-14);
}

TEST(ColumnPivotedQr, RandomReconstructionAndInvariants) {
    Rng rng(11);
    const Matrix a = random_gaussian(100, 60, rng);
    const PivotedQR qr = column_pivoted_qr(a, 60, true);
    expect_diag_non_increasing(qr);

    const Matrix ap = permuted_columns(a, qr.perm);
    const Matrix qr_prod = matmul(qr.q, qr.r);
    EXPECT_LE((ap - qr_prod).frobenius_norm() / a.frobenius_norm(), 1e-12);
    EXPECT_LE((ap - qr_prod).max_abs(), 1e-9 * a.max_abs());

    const Matrix qtq = matmul_tn(qr.q, qr.q);
    EXPECT_LE((qtq - Matrix::identity(60)).max_abs(), 1e-10);
    for (std::size_t i = 0; i < qr.r.rows(); ++i)
        for (std::size_t j = 0; j < i; ++j) EXPECT_EQ(qr.r(i, j), 0.0);
}

TEST(ColumnPivotedQr, PartialFactorizationMatchesLeadingRows) {
    Rng rng(12);
    const Matrix a = random_gaussian(40, 25, rng);
    const PivotedQR full = column_pivoted_qr(a, 25);
    const PivotedQR part = column_pivoted_qr(a, 7, true);
    ASSERT_EQ(part.r.rows(), 7u);
    for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(part.perm[i], full.perm[i]);
    EXPECT_NEAR(part.next_pivot_norm, std::abs(full.diag(7)), 1e-10);
    EXPECT_LE((matmul(part.q, part.r.block(0, 0, 7, 7)) -
               a.select_columns(std::vector<std::size_t>(part.perm.begin(), part.perm.begin() + 7)))
                  .max_abs(),
              1e-12);
}

TEST(ColumnPivotedQr, WideAndTallShapes) {
    Rng rng(13);
    for (auto [n, m] : {std::pair<std::size_t, std::size_t>{5, 30}, {30, 5}, {1, 4}, {4, 1}}) {
        const Matrix a = random_gaussian(n, m, rng);
        const std::size_t ell = std::min(n, m);
        const PivotedQR qr = column_pivoted_qr(a, ell, true);
        expect_diag_non_increasing(qr);
        EXPECT_LE((matmul(qr.q, qr.r) - permuted_columns(a, qr.perm)).max_abs(), 1e-12);
    }
}

TEST(ColumnPivotedQr, RejectsNonFiniteAndBadSteps) {
    Matrix a{{1, 2}, {3, std::nan("")}};
    EXPECT_THROW(column_pivoted_qr(a, 2), InvalidInput);
    EXPECT_THROW(column_pivoted_qr(Matrix::identity(2), 3), InvalidInput);
    EXPECT_THROW(column_pivoted_qr(Matrix(), 0), InvalidInput);
}

TEST(ColumnPivotedQr, DiagonalNonIncreasingOnGradedMatrices) {
    // Graded column scales stress the norm-downdating safeguard.
    Rng rng(14);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix a = random_with_spectrum(60, 40, geometric_spectrum(40, 1e12), rng);
        const PivotedQR qr = column_pivoted_qr(a, 40);
        expect_diag_non_increasing(qr);
    }
}

TEST(SelectRank, Rank1MatrixGivesOne) {
    const Matrix a{{1, 2, 3}, {2, 4, 6}, {-1, -2, -3}};
    const PivotedQR qr = column_pivoted_qr(a, 3);
    EXPECT_EQ(select_rank(qr, RankCriterion::tolerance(0.01), a), 1u);
}

TEST(SelectRank, DiagonalProxy) {
    const std::vector<double> d{1.0, 0.5, 0.001};
    const Matrix a = Matrix::diagonal(d);
    const PivotedQR qr = column_pivoted_qr(a, 3);
    EXPECT_EQ(select_rank(qr, RankCriterion::tolerance(0.01), a), 2u);
    EXPECT_EQ(select_rank(qr, RankCriterion::fixed(7), a), 3u);
    EXPECT_EQ(select_rank(qr, RankCriterion::fixed(2), a), 2u);
}

TEST(SelectRank, TinyEpsilonUsesFullRank) {
    Rng rng(15);
    const Matrix a = random_gaussian(20, 12, rng);
    const PivotedQR qr = column_pivoted_qr(a, 12);
    EXPECT_EQ(select_rank(qr, RankCriterion::tolerance(1e-300), a), 12u);
}

TEST(SelectRank, CertificationGrowsRankUntilBoundHolds) {
    Rng rng(16);
    for (int trial = 0; trial < 10; ++trial) {
        const Matrix a = random_with_spectrum(50, 40, geometric_spectrum(40, 1e4), rng);
        const PivotedQR qr = column_pivoted_qr(a, 40);
        for (double eps : {0.3, 0.05, 0.002}) {
            const std::size_t proxy_k = select_rank(qr, RankCriterion::tolerance(eps), a);
            const std::size_t k = select_rank(qr, RankCriterion::tolerance(eps, true), a);
            EXPECT_GE(k, proxy_k);
            const double anorm = spectral_oracle(a);
            const double r22 = k < 40 ? spectral_oracle(qr.r.block(k, k, 40 - k, 40 - k)) : 0.0;
            EXPECT_LE(r22, eps * anorm);
            if (k > proxy_k) {
                const double prev = spectral_oracle(qr.r.block(k - 1, k - 1, 41 - k, 41 - k));
                EXPECT_GT(prev, eps * anorm * (1 - 1e-6));
            }
        }
    }
}

TEST(SelectRank, InvalidCriterion) {
    const Matrix a = Matrix::identity(2);
    const PivotedQR qr = column_pivoted_qr(a, 2);
    EXPECT_THROW(select_rank(qr, RankCriterion::tolerance(0.0), a), InvalidInput);
    EXPECT_THROW(select_rank(qr, RankCriterion::tolerance(1.0), a), InvalidInput);
    EXPECT_THROW(select_rank(qr, RankCriterion::fixed(0), a), InvalidInput);
}

TEST(InterpolativeDecomposition, FullRankIsPermutation) {
    Rng rng(21);
    const Matrix a = random_gaussian(8, 5, rng);
    const Interpolation id = interpolative_decomposition(a, RankCriterion::fixed(5));
    std::set<std::size_t> idx(id.indices.begin(), id.indices.end());
    EXPECT_EQ(idx.size(), 5u);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j)
            EXPECT_EQ(id.t(i, id.indices[j]), i == j ? 1.0 : 0.0);
    EXPECT_EQ(id.achieved_error, 0.0);
    EXPECT_LE((a - matmul(a.select_columns(id.indices), id.t)).max_abs(), 0.0);
}

TEST(InterpolativeDecomposition, Rank1ColumnRatios) {
    // Columns c, 2c, 0.5c.
    const std::vector<double> c{1.0, -2.0, 0.5};
    Matrix a(3, 3);
    for (std::size_t i = 0; i < 3; ++i) {
        a(i, 0) = c[i];
        a(i, 1) = 2.0 * c[i];
        a(i, 2) = 0.5 * c[i];
    }
    const Interpolation id = interpolative_decomposition(a, RankCriterion::fixed(1));
    ASSERT_EQ(id.indices, (std::vector<std::size_t>{1}));
    EXPECT_NEAR(id.t(0, 0), 0.5, 1e-15);
    EXPECT_EQ(id.t(0, 1), 1.0);
    EXPECT_NEAR(id.t(0, 2), 0.25, 1e-15);
    EXPECT_LE(id.achieved_error, 1e-14);
    EXPECT_LE(id_residual_norm(a, id), 1e-14);
}

TEST(InterpolativeDecomposition, CertifiedErrorMatchesResidualAndSvdBound) {
    Rng rng(22);
    const Matrix a = random_gaussian(50, 30, rng);
    const Interpolation id = interpolative_decomposition(a, RankCriterion::fixed(10, true));
    ASSERT_TRUE(id.certified);
    const double resid = spectral_oracle(a - matmul(a.select_columns(id.indices), id.t));
    EXPECT_NEAR(resid, id.achieved_error, 1e-8 * id.achieved_error);
    const auto sv = svd_oracle(a);
    EXPECT_GE(id.achieved_error, sv[10] - 1e-8 * sv[0]);
    EXPECT_LE(id.achieved_error, 10.0 * sv[10]);
}

TEST(InterpolativeDecomposition, SelectedColumnsOfTFormIdentity) {
    Rng rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 5 + rng.below(40);
        const std::size_t m = 5 + rng.below(40);
        const Matrix a = random_gaussian(n, m, rng);
        const std::size_t k = 1 + rng.below(std::min(n, m));
        const Interpolation id = interpolative_decomposition(a, RankCriterion::fixed(k));
        ASSERT_EQ(id.t.rows(), k);
        ASSERT_EQ(id.t.cols(), m);
        std::set<std::size_t> seen;
        for (std::size_t i = 0; i < k; ++i) {
            ASSERT_LT(id.indices[i], m);
            seen.insert(id.indices[i]);
            for (std::size_t j = 0; j < k; ++j)
                EXPECT_EQ(id.t(i, id.indices[j]), i == j ? 1.0 : 0.0);
        }
        EXPECT_EQ(seen.size(), k);
    }
}

TEST(InterpolativeDecomposition, ExactLowRankIsRecovered) {
    Rng rng(24);
    for (std::size_t rank : {1u, 3u, 9u}) {
        const Matrix a = random_with_spectrum(40, 30, geometric_spectrum(rank, 10.0), rng);
        const Interpolation id = interpolative_decomposition(a, RankCriterion::fixed(rank));
        EXPECT_LE(id_residual_norm(a, id), 1e-10 * spectral_oracle(a));
    }
}

TEST(InterpolativeDecomposition, EpsilonCertifiedSatisfiesDefinition) {
    Rng rng(25);
    for (int trial = 0; trial < 10; ++trial) {
        const Matrix a = random_with_spectrum(60, 45, geometric_spectrum(45, 1e5), rng);
        for (double eps : {0.5, 0.1, 0.01}) {
            const Interpolation id = interpolative_decomposition(a, RankCriterion::tolerance(eps, true));
            EXPECT_TRUE(id.certified);
            const double resid = spectral_oracle(a - matmul(a.select_columns(id.indices), id.t));
            EXPECT_LE(resid, eps * spectral_oracle(a));
        }
    }
}

TEST(InterpolativeDecomposition, SingularR11IsRejectedOrTruncated) {
    const Matrix a{{1, 2, 0}, {2, 4, 0}};
    EXPECT_THROW(interpolative_decomposition(a, RankCriterion::fixed(2)), RankDeficiency);
    const Interpolation id =
        interpolative_decomposition(a, RankCriterion::fixed(2), RankDeficiencyPolicy::truncate);
    EXPECT_TRUE(id.rank_truncated);
    EXPECT_EQ(id.indices.size(), 2u);
    EXPECT_LE((a - matmul(a.select_columns(id.indices), id.t)).max_abs(), 1e-14);
}

TEST(InterpolativeDecomposition, RejectsZeroMatrix) {
    EXPECT_THROW(interpolative_decomposition(Matrix(3, 3), RankCriterion::fixed(1)), InvalidInput);
}

TEST(SpectralNorm, DiagonalAndNilpotent) {
    const std::vector<double> d{3.0, 1.0, 2.0};
    EXPECT_NEAR(spectral_norm(Matrix::diagonal(d)), 3.0, 3e-6);
    EXPECT_NEAR(spectral_norm(Matrix{{0, 1}, {0, 0}}), 1.0, 1e-6);
    EXPECT_EQ(spectral_norm(Matrix(4, 3)), 0.0);
}

TEST(SpectralNorm, RandomMatchesSvd) {
    Rng rng(31);
    const Matrix a = random_gaussian(40, 40, rng);
    const double oracle = spectral_oracle(a);
    EXPECT_NEAR(spectral_norm(a), oracle, 1e-5 * oracle);
}

TEST(SingularValues, MatchesEigen) {
    Rng rng(32);
    for (auto [n, m] : {std::pair<std::size_t, std::size_t>{30, 20}, {20, 30}, {17, 17}}) {
        const Matrix a = random_gaussian(n, m, rng);
        const auto ours = singular_values(a);
        const auto ref = svd_oracle(a);
        ASSERT_EQ(ours.size(), ref.size());
        for (std::size_t i = 0; i < ours.size(); ++i) EXPECT_NEAR(ours[i], ref[i], 1e-12 * ref[0]);
    }
}

TEST(SingularValueProfile, DiagonalCase) {
    const std::vector<double> d{1.0, 0.1};
    const auto profile = singular_value_profile(Matrix::diagonal(d));
    ASSERT_EQ(profile.size(), 2u);
    EXPECT_DOUBLE_EQ(profile[0].proxy, 1.0);
    EXPECT_NEAR(profile[0].trailing_ratio, 1.0, 1e-6);
    EXPECT_NEAR(profile[1].proxy, 0.1, 1e-15);
    EXPECT_NEAR(profile[1].trailing_ratio, 0.1, 1e-6);
}

TEST(SingularValueProfile, Rank1DropsToZero) {
    const Matrix a{{1, 2, 3}, {2, 4, 6}, {3, 6, 9}};
    const auto profile = singular_value_profile(a);
    for (std::size_t k = 1; k < profile.size(); ++k) {
        EXPECT_LE(profile[k].proxy, 1e-14);
        EXPECT_LE(profile[k].trailing_ratio, 1e-14);
    }
}

TEST(SingularValueProfile, CurvesAreNonIncreasing) {
    Rng rng(33);
    const Matrix a = random_gaussian(30, 30, rng);
    const auto profile = singular_value_profile(a);
    for (std::size_t k = 1; k < profile.size(); ++k) {
        EXPECT_LE(profile[k].proxy, profile[k - 1].proxy);
        EXPECT_LE(profile[k].trailing_ratio, profile[k - 1].trailing_ratio * (1 + 1e-6));
    }
}
