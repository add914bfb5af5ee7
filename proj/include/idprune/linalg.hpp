#pragma once

// Column-pivoted Householder QR (Businger-Golub), interpolative decompositions
// built on it, spectral norms and the rank-selection diagnostics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "idprune/error.hpp"
#include "idprune/matrix.hpp"
#include "idprune/rng.hpp"

namespace idprune {

// Ratio |r_kk / r_11| below which R11 counts as numerically singular.
inline constexpr double kSingularCutoff = 1e-14;

// How the rank k of an interpolative decomposition is chosen.
struct RankCriterion {
    enum class Mode { fixed_rank, epsilon };

    Mode mode = Mode::fixed_rank;
    std::size_t rank = 1;
    double epsilon = 0.0;
    // Compute ||R22||_2 exactly; in epsilon mode also grow k until the
    // relative error bound holds.
    bool certify = false;

    static RankCriterion fixed(std::size_t k, bool certify = false) {
        RankCriterion c;
        c.mode = Mode::fixed_rank;
        c.rank = k;
        c.certify = certify;
        return c;
    }

    static RankCriterion tolerance(double eps, bool certify = false) {
        RankCriterion c;
        c.mode = Mode::epsilon;
        c.epsilon = eps;
        c.certify = certify;
        return c;
    }

    void validate() const {
        if (mode == Mode::fixed_rank && rank < 1) throw InvalidInput("fixed rank must be >= 1");
        if (mode == Mode::epsilon && !(epsilon > 0.0 && epsilon < 1.0))
            throw InvalidInput("epsilon must lie in (0, 1), got " + std::to_string(epsilon));
    }
};

// A Pi = Q R for the first `steps` pivot steps.
//
// `r` has `steps` rows and all m columns (upper trapezoidal). When
// steps == min(n, m) the factorization is complete and r is the full
// l x m factor. `q` is filled only when requested and then has `steps`
// orthonormal columns. perm[i] is the original index of the column chosen
// at step i; entries past `steps` list the unchosen columns in their final
// working order.
struct PivotedQR {
    Matrix q;
    Matrix r;
    std::vector<std::size_t> perm;
    std::size_t steps = 0;
    std::size_t min_dim = 0;
    // Largest residual column norm left after `steps` steps (0 when complete).
    double next_pivot_norm = 0.0;

    bool complete() const { return steps == min_dim; }
    double diag(std::size_t i) const { return r(i, i); }
};

// Index set plus interpolation matrix: A ~= A(:, indices) * t.
struct Interpolation {
    std::vector<std::size_t> indices;
    Matrix t;
    double achieved_error = 0.0;
    bool certified = false;
    // Set when R11 was numerically singular and the solve was truncated to
    // the leading well-conditioned block.
    bool rank_truncated = false;
};

enum class RankDeficiencyPolicy {
    // Throw RankDeficiency; the caller has to lower k.
    fail,
    // Keep k columns but interpolate from the numerically independent ones only.
    truncate,
};

namespace detail {

inline void require_finite(const Matrix& a, const char* what) {
    if (!a.all_finite()) throw InvalidInput(std::string(what) + ": non-finite entries");
}

inline double dot(const double* x, const double* y, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

inline double norm2(const double* x, std::size_t n) {
    // Scaled accumulation keeps tiny and huge columns from under/overflowing.
    double scale = 0.0;
    double ssq = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (x[i] == 0.0) continue;
        const double ax = std::abs(x[i]);
        if (scale < ax) {
            ssq = 1.0 + ssq * (scale / ax) * (scale / ax);
            scale = ax;
        } else {
            ssq += (ax / scale) * (ax / scale);
        }
    }
    return scale * std::sqrt(ssq);
}

}  // namespace detail

// Householder QR with Businger-Golub column pivoting, run for `max_steps`
// steps. Column norms are downdated after each step and recomputed whenever a
// downdated norm drops below 0.1x its last exact value. Equal norms resolve
// to the lowest original column index.
inline PivotedQR column_pivoted_qr(const Matrix& a, std::size_t max_steps,
                                   bool accumulate_q = false) {
    const std::size_t n = a.rows();
    const std::size_t m = a.cols();
    if (n == 0 || m == 0) throw InvalidInput("column_pivoted_qr: empty matrix");
    const std::size_t ell = std::min(n, m);
    if (max_steps > ell)
        throw InvalidInput("column_pivoted_qr: max_steps " + std::to_string(max_steps) +
                           " exceeds min(rows, cols) = " + std::to_string(ell));
    detail::require_finite(a, "column_pivoted_qr");

    // Column-major working copy; column j lives at w[j * n].
    std::vector<double> w(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) w[j * n + i] = a(i, j);

    std::vector<std::size_t> perm(m);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::vector<double> norms(m), exact(m);
    for (std::size_t j = 0; j < m; ++j) norms[j] = exact[j] = detail::norm2(&w[j * n], n);

    // Householder vectors (v with v[0] at row s) and their tau.
    std::vector<std::vector<double>> reflectors;
    std::vector<double> taus;
    if (accumulate_q) {
        reflectors.reserve(max_steps);
        taus.reserve(max_steps);
    }

    std::vector<double> v(n);
    for (std::size_t s = 0; s < max_steps; ++s) {
        std::size_t p = s;
        for (std::size_t j = s + 1; j < m; ++j) {
            if (norms[j] > norms[p] || (norms[j] == norms[p] && perm[j] < perm[p])) p = j;
        }
        if (p != s) {
            std::swap_ranges(w.begin() + static_cast<std::ptrdiff_t>(s * n),
                             w.begin() + static_cast<std::ptrdiff_t>((s + 1) * n),
                             w.begin() + static_cast<std::ptrdiff_t>(p * n));
            std::swap(perm[s], perm[p]);
            std::swap(norms[s], norms[p]);
            std::swap(exact[s], exact[p]);
        }

        double* col = &w[s * n];
        const std::size_t len = n - s;
        const double xnorm = detail::norm2(col + s, len);
        double tau = 0.0;
        std::fill(v.begin(), v.end(), 0.0);
        if (xnorm > 0.0) {
            const double alpha = col[s] >= 0.0 ? -xnorm : xnorm;
            for (std::size_t i = 0; i < len; ++i) v[i] = col[s + i];
            v[0] -= alpha;
            const double vv = detail::dot(v.data(), v.data(), len);
            tau = vv > 0.0 ? 2.0 / vv : 0.0;
            col[s] = alpha;
            for (std::size_t i = 1; i < len; ++i) col[s + i] = 0.0;
            for (std::size_t j = s + 1; j < m; ++j) {
                double* cj = &w[j * n + s];
                const double f = tau * detail::dot(v.data(), cj, len);
                if (f == 0.0) continue;
                for (std::size_t i = 0; i < len; ++i) cj[i] -= f * v[i];
            }
        }
        if (accumulate_q) {
            reflectors.emplace_back(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(len));
            taus.push_back(tau);
        }

        for (std::size_t j = s + 1; j < m; ++j) {
            if (norms[j] == 0.0) continue;
            const double ratio = std::abs(w[j * n + s]) / norms[j];
            const double shrink = std::max(0.0, (1.0 + ratio) * (1.0 - ratio));
            const double downdated = norms[j] * std::sqrt(shrink);
            if (downdated < 0.1 * exact[j]) {
                const double fresh = s + 1 < n ? detail::norm2(&w[j * n + s + 1], n - s - 1) : 0.0;
                norms[j] = exact[j] = fresh;
            } else {
                norms[j] = downdated;
            }
        }
    }

    PivotedQR out;
    out.steps = max_steps;
    out.min_dim = ell;
    out.perm = std::move(perm);
    out.r = Matrix(max_steps, m);
    for (std::size_t i = 0; i < max_steps; ++i)
        for (std::size_t j = i; j < m; ++j) out.r(i, j) = w[j * n + i];
    if (max_steps < ell) {
        double best = 0.0;
        for (std::size_t j = max_steps; j < m; ++j)
            best = std::max(best, detail::norm2(&w[j * n + max_steps], n - max_steps));
        out.next_pivot_norm = best;
    }

    if (accumulate_q) {
        // Q1 = H_0 H_1 ... H_{s-1} [I; 0], applied right to left.
        std::vector<double> qc(n * max_steps, 0.0);  // column-major
        for (std::size_t j = 0; j < max_steps; ++j) qc[j * n + j] = 1.0;
        for (std::size_t s = max_steps; s-- > 0;) {
            const auto& vs = reflectors[s];
            const double tau = taus[s];
            if (tau == 0.0) continue;
            const std::size_t len = n - s;
            for (std::size_t j = 0; j < max_steps; ++j) {
                double* cj = &qc[j * n + s];
                const double f = tau * detail::dot(vs.data(), cj, len);
                for (std::size_t i = 0; i < len; ++i) cj[i] -= f * vs[i];
            }
        }
        out.q = Matrix(n, max_steps);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < max_steps; ++j) out.q(i, j) = qc[j * n + i];
    }
    return out;
}

// Largest singular value by power iteration on A^T A from a fixed start
// vector. Stops when the estimate changes by less than `rel_tol` relative.
inline double spectral_norm(const Matrix& a, double rel_tol = 1e-6, int max_iter = 1000) {
    if (a.empty()) throw InvalidInput("spectral_norm: empty matrix");
    const std::size_t n = a.rows();
    const std::size_t m = a.cols();
    if (a.max_abs() == 0.0) return 0.0;

    std::vector<double> x(m), y(n), z(m);
    Rng rng(0x9e3779b97f4a7c15ULL);
    for (double& xi : x) xi = rng.normal();
    double xn = detail::norm2(x.data(), m);
    for (double& xi : x) xi /= xn;

    double sigma = 0.0;
    for (int it = 0; it < max_iter; ++it) {
        for (std::size_t i = 0; i < n; ++i) y[i] = detail::dot(a.row(i).data(), x.data(), m);
        std::fill(z.begin(), z.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double yi = y[i];
            const double* ai = a.row(i).data();
            for (std::size_t j = 0; j < m; ++j) z[j] += yi * ai[j];
        }
        const double next = detail::norm2(y.data(), n);
        const double zn = detail::norm2(z.data(), m);
        if (zn == 0.0) return next;
        for (std::size_t j = 0; j < m; ++j) x[j] = z[j] / zn;
        const bool converged = it > 0 && std::abs(next - sigma) <= rel_tol * next;
        sigma = next;
        if (converged) break;
    }
    return sigma;
}

// All singular values, descending, by one-sided (Hestenes) Jacobi rotations.
// Slower than spectral_norm but accurate to working precision.
inline std::vector<double> singular_values(const Matrix& a) {
    if (a.empty()) return {};
    const bool flip = a.cols() > a.rows();
    const std::size_t p = flip ? a.cols() : a.rows();  // column length
    const std::size_t q = flip ? a.rows() : a.cols();  // column count
    std::vector<double> b(p * q);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) {
            if (flip) b[i * p + j] = a(i, j);
            else b[j * p + i] = a(i, j);
        }

    constexpr double tol = 1e-15;
    for (int sweep = 0; sweep < 80; ++sweep) {
        bool rotated = false;
        for (std::size_t i = 0; i + 1 < q; ++i) {
            double* bi = &b[i * p];
            for (std::size_t j = i + 1; j < q; ++j) {
                double* bj = &b[j * p];
                const double alpha = detail::dot(bi, bi, p);
                const double beta = detail::dot(bj, bj, p);
                const double gamma = detail::dot(bi, bj, p);
                if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t k = 0; k < p; ++k) {
                    const double u = bi[k];
                    const double w = bj[k];
                    bi[k] = c * u - s * w;
                    bj[k] = s * u + c * w;
                }
            }
        }
        if (!rotated) break;
    }
    std::vector<double> sv(q);
    for (std::size_t j = 0; j < q; ++j) sv[j] = detail::norm2(&b[j * p], p);
    std::sort(sv.begin(), sv.end(), std::greater<>());
    return sv;
}

inline double exact_spectral_norm(const Matrix& a) {
    if (a.empty()) return 0.0;
    return singular_values(a).front();
}

// Solves R X = B for upper-triangular R (k x k).
inline Matrix back_substitute(const Matrix& r, const Matrix& b) {
    const std::size_t k = r.rows();
    if (r.cols() != k || b.rows() != k) throw ShapeError("back_substitute: shape mismatch");
    Matrix x = b;
    for (std::size_t col = 0; col < b.cols(); ++col) {
        for (std::size_t i = k; i-- > 0;) {
            double s = x(i, col);
            for (std::size_t j = i + 1; j < k; ++j) s -= r(i, j) * x(j, col);
            x(i, col) = s / r(i, i);
        }
    }
    return x;
}

namespace detail {

// ||R22||_2 for the split at k of a complete factorization.
inline double trailing_norm_exact(const PivotedQR& qr, std::size_t k) {
    if (k >= qr.min_dim || k >= qr.r.cols()) return 0.0;
    return exact_spectral_norm(qr.r.block(k, k, qr.min_dim - k, qr.r.cols() - k));
}

inline void require_nonzero_pivot(const PivotedQR& qr) {
    if (qr.steps == 0 || qr.diag(0) == 0.0) throw InvalidInput("matrix is identically zero");
}

}  // namespace detail

// Chooses the ID rank from a pivoted QR of `a`.
//
// Fixed mode returns min(k, l). Epsilon mode returns the smallest k with
// |r_{k+1,k+1} / r_11| <= eps (l when none); with certification it then
// grows k until ||R22||_2 <= eps ||A||_2. ||R22||_2 is non-increasing in k, so
// the growth step is a bisection rather than a linear scan.
inline std::size_t select_rank(const PivotedQR& qr, const RankCriterion& criterion,
                               const Matrix& a) {
    criterion.validate();
    const std::size_t ell = qr.min_dim;
    if (criterion.mode == RankCriterion::Mode::fixed_rank) return std::min(criterion.rank, ell);

    detail::require_nonzero_pivot(qr);
    const double r11 = std::abs(qr.diag(0));
    std::size_t k = qr.steps;
    for (std::size_t i = 1; i < qr.steps; ++i) {
        if (std::abs(qr.diag(i)) <= criterion.epsilon * r11) {
            k = i;
            break;
        }
    }
    if (k == qr.steps && qr.steps < ell) {
        if (qr.next_pivot_norm > criterion.epsilon * r11)
            throw InvalidInput("select_rank: factorization too short for the requested epsilon");
    }
    if (!criterion.certify) return k;

    if (!qr.complete()) throw InvalidInput("select_rank: certification needs a complete factorization");
    // Power iteration converges from below, so this threshold is conservative.
    const double threshold = criterion.epsilon * spectral_norm(a, 1e-10, 5000);
    if (detail::trailing_norm_exact(qr, k) <= threshold) return k;
    std::size_t lo = k;  // fails
    std::size_t hi = ell;  // ||R22|| = 0 there
    while (hi - lo > 1) {
        const std::size_t mid = lo + (hi - lo) / 2;
        if (detail::trailing_norm_exact(qr, mid) <= threshold) hi = mid;
        else lo = mid;
    }
    return hi;
}

// Builds the ID of `a` from its pivoted QR: indices are the first k pivots and
// T = [I_k  R11^{-1} R12] Pi^T, so ||A - A(:, I) T||_2 = ||R22||_2.
inline Interpolation interpolation_from_qr(const PivotedQR& qr, std::size_t k,
                                           RankDeficiencyPolicy policy, bool certify) {
    const std::size_t m = qr.r.cols();
    if (k == 0 || k > qr.steps) throw InvalidInput("interpolation_from_qr: bad rank");
    detail::require_nonzero_pivot(qr);
    const double r11 = std::abs(qr.diag(0));

    std::size_t solve_rank = k;
    for (std::size_t i = 0; i < k; ++i) {
        if (std::abs(qr.diag(i)) < kSingularCutoff * r11) {
            if (policy == RankDeficiencyPolicy::fail) {
                throw RankDeficiency("R11 is numerically singular at column " + std::to_string(i + 1) +
                                     " of " + std::to_string(k) + "; lower the rank to at most " +
                                     std::to_string(i));
            }
            solve_rank = i;
            break;
        }
    }

    Interpolation id;
    id.indices.assign(qr.perm.begin(), qr.perm.begin() + static_cast<std::ptrdiff_t>(k));
    id.t = Matrix(k, m);
    for (std::size_t i = 0; i < k; ++i) id.t(i, qr.perm[i]) = 1.0;
    if (k < m) {
        // Rows of X beyond solve_rank stay zero under truncation.
        const Matrix r11_block = qr.r.block(0, 0, solve_rank, solve_rank);
        const Matrix r12_block = qr.r.block(0, k, solve_rank, m - k);
        const Matrix x = back_substitute(r11_block, r12_block);
        for (std::size_t i = 0; i < solve_rank; ++i)
            for (std::size_t j = 0; j < m - k; ++j) id.t(i, qr.perm[k + j]) = x(i, j);
    }

    id.rank_truncated = solve_rank < k;
    if (id.rank_truncated) {
        id.achieved_error = std::abs(qr.diag(solve_rank));
    } else if (certify) {
        if (!qr.complete()) throw InvalidInput("certified ID needs a complete factorization");
        id.achieved_error = detail::trailing_norm_exact(qr, k);
        id.certified = true;
    } else if (k < qr.steps) {
        id.achieved_error = std::abs(qr.diag(k));
    } else {
        id.achieved_error = qr.next_pivot_norm;
    }
    return id;
}

inline Interpolation interpolative_decomposition(
    const Matrix& a, const RankCriterion& criterion,
    RankDeficiencyPolicy policy = RankDeficiencyPolicy::fail) {
    criterion.validate();
    if (a.empty()) throw InvalidInput("interpolative_decomposition: empty matrix");
    detail::require_finite(a, "interpolative_decomposition");
    if (a.max_abs() == 0.0) throw InvalidInput("interpolative_decomposition: zero matrix");
    const std::size_t ell = std::min(a.rows(), a.cols());

    const bool partial = criterion.mode == RankCriterion::Mode::fixed_rank && !criterion.certify;
    const std::size_t steps = partial ? std::min(criterion.rank, ell) : ell;
    const PivotedQR qr = column_pivoted_qr(a, steps);
    const std::size_t k = select_rank(qr, criterion, a);
    return interpolation_from_qr(qr, k, policy, criterion.certify);
}

// ||A - A(:, indices) T||_2 computed directly; test and report helper.
inline double id_residual_norm(const Matrix& a, const Interpolation& id, bool exact = true) {
    Matrix diff = a - matmul(a.select_columns(id.indices), id.t);
    return exact ? exact_spectral_norm(diff) : spectral_norm(diff);
}

struct ProfilePoint {
    std::size_t k = 0;
    double proxy = 0.0;           // |r_{k+1,k+1} / r_11|
    double trailing_ratio = 0.0;  // ||R22||_2 / ||R||_2
};

// Both rank diagnostics over k = 0 .. l-1.
inline std::vector<ProfilePoint> singular_value_profile(const Matrix& a) {
    if (a.empty()) throw InvalidInput("singular_value_profile: empty matrix");
    const std::size_t ell = std::min(a.rows(), a.cols());
    const PivotedQR qr = column_pivoted_qr(a, ell);
    detail::require_nonzero_pivot(qr);
    const double r11 = std::abs(qr.diag(0));
    const double rnorm = spectral_norm(qr.r);
    std::vector<ProfilePoint> out;
    out.reserve(ell);
    const std::size_t m = qr.r.cols();
    for (std::size_t k = 0; k < ell; ++k) {
        ProfilePoint pt;
        pt.k = k;
        pt.proxy = std::abs(qr.diag(k)) / r11;
        pt.trailing_ratio = spectral_norm(qr.r.block(k, k, ell - k, m - k)) / rnorm;
        out.push_back(pt);
    }
    return out;
}

}  // namespace idprune
