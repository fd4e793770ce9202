#pragma once

// Thin SVD by one-sided (Hestenes) Jacobi rotations, plus condition numbers.
//
// The thin factors are enough for everything downstream: for X = U S V^T
// with the full N x N / d x d factors, any matrix of the form U S' V^T with S'
// diagonal equals sum_l s'_l u_l v_l^T over the k = min(N, d) leading
// columns, which is exactly what the thin U and V^T hold.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "condtok/error.hpp"
#include "condtok/matrix.hpp"

namespace condtok {

struct SvdResult {
    Matrix u;                    // rows x k, orthonormal columns
    std::vector<double> sigma;   // length k, non-increasing, >= 0
    Matrix vt;                   // k x cols, orthonormal rows

    Matrix reconstruct() const {
        Matrix us = u;
        for (std::size_t i = 0; i < us.rows(); ++i)
            for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= sigma[j];
        return matmul(us, vt);
    }
};

struct SvdOptions {
    double tolerance = 1e-13;
    int max_sweeps = 60;
};

namespace detail {

inline double dot(const double* a, const double* b, std::size_t n) noexcept {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline void rotate(double* a, double* b, std::size_t n, double c, double s) noexcept {
    for (std::size_t i = 0; i < n; ++i) {
        const double x = a[i], y = b[i];
        a[i] = c * x - s * y;
        b[i] = s * x + c * y;
    }
}

// Replaces near-null columns of q (stored as rows of length `len`) with unit
// vectors orthogonal to every accepted column.
inline void complete_orthonormal(std::vector<std::vector<double>>& q, const std::vector<bool>& valid,
                                 std::size_t len) {
    std::vector<std::size_t> accepted;
    for (std::size_t j = 0; j < q.size(); ++j)
        if (valid[j]) accepted.push_back(j);
    std::size_t basis = 0;
    for (std::size_t j = 0; j < q.size(); ++j) {
        if (valid[j]) continue;
        while (basis < len) {
            std::vector<double> cand(len, 0.0);
            cand[basis++] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t a : accepted) {
                    const double p = dot(cand.data(), q[a].data(), len);
                    for (std::size_t i = 0; i < len; ++i) cand[i] -= p * q[a][i];
                }
            }
            const double nrm = std::sqrt(dot(cand.data(), cand.data(), len));
            if (nrm > 1e-3) {
                for (double& v : cand) v /= nrm;
                q[j] = std::move(cand);
                accepted.push_back(j);
                break;
            }
        }
    }
}

}  // namespace detail

/// Thin SVD, deterministic for identical input bytes. Column pairs are swept
/// in fixed (p, q) lexicographic order until every pair's cosine falls below
/// `opts.tolerance`; throws ConvergenceError after `opts.max_sweeps` sweeps.
inline SvdResult svd(const Matrix& a, const SvdOptions& opts = {}) {
    if (a.empty()) throw DimensionError("svd: empty matrix");
    a.check_finite("svd input");

    // Orthogonalize the columns of B (m x n, m >= n). B = A, or A^T if A is wide.
    const bool wide = a.rows() < a.cols();
    const std::size_t n = std::min(a.rows(), a.cols());
    const std::size_t m = std::max(a.rows(), a.cols());

    // g[j] holds column j of B contiguously; v[j] holds column j of V.
    std::vector<std::vector<double>> g(n, std::vector<double>(m));
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < m; ++i) g[j][i] = wide ? a(j, i) : a(i, j);
    std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
    for (std::size_t j = 0; j < n; ++j) v[j][j] = 1.0;

    double residual = 0.0;
    bool converged = (n == 1);
    for (int sweep = 0; sweep < opts.max_sweeps && !converged; ++sweep) {
        residual = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double alpha = detail::dot(g[p].data(), g[p].data(), m);
                const double beta = detail::dot(g[q].data(), g[q].data(), m);
                const double gamma = detail::dot(g[p].data(), g[q].data(), m);
                if (alpha == 0.0 || beta == 0.0 || gamma == 0.0) continue;
                const double off = std::abs(gamma) / std::sqrt(alpha * beta);
                residual = std::max(residual, off);
                if (off <= opts.tolerance) continue;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::hypot(1.0, zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                detail::rotate(g[p].data(), g[q].data(), m, c, s);
                detail::rotate(v[p].data(), v[q].data(), n, c, s);
            }
        }
        converged = residual <= opts.tolerance;
    }
    if (!converged) {
        throw ConvergenceError("svd: no convergence after " + std::to_string(opts.max_sweeps) +
                                   " sweeps, residual " + std::to_string(residual),
                               residual);
    }

    std::vector<double> norms(n);
    for (std::size_t j = 0; j < n; ++j) norms[j] = std::sqrt(detail::dot(g[j].data(), g[j].data(), m));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

    std::vector<double> sigma(n);
    std::vector<std::vector<double>> left(n), right(n);
    std::vector<bool> valid(n, true);
    const double smax = norms[order[0]];
    const double null_cut = smax * std::numeric_limits<double>::epsilon() * static_cast<double>(m);
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t j = order[r];
        sigma[r] = norms[j];
        left[r] = g[j];
        right[r] = v[j];
        if (norms[j] == 0.0 || norms[j] <= null_cut) {
            valid[r] = false;
        } else {
            for (double& x : left[r]) x /= norms[j];
        }
    }
    detail::complete_orthonormal(left, valid, m);

    // B = L diag(sigma) R^T. For a tall A, U = L and V = R; for a wide A the
    // roles swap because A = B^T.
    const auto& ucols = wide ? right : left;
    const auto& vcols = wide ? left : right;
    SvdResult out{Matrix(a.rows(), n), std::move(sigma), Matrix(n, a.cols())};
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t i = 0; i < a.rows(); ++i) out.u(i, r) = ucols[r][i];
        for (std::size_t j = 0; j < a.cols(); ++j) out.vt(r, j) = vcols[r][j];
    }
    return out;
}

inline std::vector<double> singular_values(const Matrix& a) { return svd(a).sigma; }

/// Below this sigma_min / sigma_max ratio a matrix is treated as rank deficient.
inline constexpr double kRankTolerance = 1e-12;

struct ConditionReport {
    double kappa = 1.0;  // +inf when rank_deficient
    double sigma_max = 0.0;
    double sigma_min = 0.0;
    bool rank_deficient = false;
};

inline ConditionReport condition_from_sigma(const std::vector<double>& sigma) {
    ConditionReport r;
    r.sigma_max = sigma.front();
    r.sigma_min = sigma.back();
    if (r.sigma_max == 0.0 || r.sigma_min / r.sigma_max < kRankTolerance) {
        r.rank_deficient = true;
        r.kappa = std::numeric_limits<double>::infinity();
    } else {
        r.kappa = r.sigma_max / r.sigma_min;
    }
    return r;
}

inline ConditionReport condition_number(const Matrix& a) { return condition_from_sigma(singular_values(a)); }

/// kappa(a), throwing RankDeficientError (mentioning `what`) instead of
/// returning infinity.
inline double kappa_or_throw(const Matrix& a, const std::string& what) {
    const auto r = condition_number(a);
    if (r.rank_deficient) {
        throw RankDeficientError(what + " is rank deficient (sigma_min/sigma_max = " +
                                 std::to_string(r.sigma_max == 0.0 ? 0.0 : r.sigma_min / r.sigma_max) +
                                 ")");
    }
    return r.kappa;
}

}  // namespace condtok
