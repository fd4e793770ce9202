#pragma once

// Correction matrices for embedded tokens and the attention conditioning
// measures they act on.
//
//   mu_linear  = k(W_Q) k(W_K) k(W_V) k(X)^3         bounds k(X W_Q W_K^T X^T X W_V)
//   mu_softmax = k(softmax(X W_Q W_K^T X^T)) k(X) k(W_V)   bounds k(A(X))
//
// Both bounds come from chaining k(AB) <= k(A) k(B), which is only a theorem
// when the factor shapes compose injectively. With square d x d weights it
// holds for every full-rank tuple; with narrow d x d_h heads it can fail.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "condtok/error.hpp"
#include "condtok/matrix.hpp"
#include "condtok/svd.hpp"

namespace condtok {

enum class CorrectionKind { ExactSvd, IdentityScaled };

inline const char* to_string(CorrectionKind k) {
    return k == CorrectionKind::ExactSvd ? "exact" : "identity";
}

struct CorrectionSpec {
    CorrectionKind kind = CorrectionKind::IdentityScaled;
    double lambda = 10.0;  // only used by IdentityScaled

    static CorrectionSpec exact() { return {CorrectionKind::ExactSvd, 10.0}; }
    static CorrectionSpec identity(double lambda = 10.0) {
        return {CorrectionKind::IdentityScaled, lambda};
    }

    void validate() const {
        if (kind == CorrectionKind::IdentityScaled && !(lambda > 0.0 && std::isfinite(lambda))) {
            throw InvalidArgument("correction lambda must be positive and finite, got " +
                                  std::to_string(lambda));
        }
    }

    friend bool operator==(const CorrectionSpec&, const CorrectionSpec&) = default;
};

/// A correction C, fixed once built. There is no mutable access to the
/// entries; training treats C as a constant and never produces a gradient
/// for it.
class CorrectionMatrix {
public:
    CorrectionMatrix(Matrix c, CorrectionSpec spec) : c_(std::move(c)), spec_(spec) {}

    const Matrix& matrix() const noexcept { return c_; }
    const CorrectionSpec& spec() const noexcept { return spec_; }
    static constexpr bool frozen() noexcept { return true; }
    std::size_t rows() const noexcept { return c_.rows(); }
    std::size_t cols() const noexcept { return c_.cols(); }

    friend bool operator==(const CorrectionMatrix&, const CorrectionMatrix&) = default;

private:
    Matrix c_;
    CorrectionSpec spec_;
};

/// C = sigma_1 * U V^T from the thin SVD of x, so that X + C keeps the
/// singular vectors of X and has singular values sigma_1 + sigma_l. Then
/// k(X + C) = 2 sigma_1 / (sigma_1 + sigma_k) <= 2.
inline CorrectionMatrix exact_correction(const Matrix& x) {
    const SvdResult f = svd(x);
    const ConditionReport cond = condition_from_sigma(f.sigma);
    if (cond.rank_deficient) {
        throw RankDeficientError("exact correction needs full-rank tokens; sigma_min/sigma_max = " +
                                 std::to_string(cond.sigma_max == 0 ? 0.0 : cond.sigma_min / cond.sigma_max));
    }
    Matrix c = matmul(f.u, f.vt);
    c *= f.sigma.front();
    return CorrectionMatrix(std::move(c), CorrectionSpec::exact());
}

/// lambda * I_k: the n x d matrix with lambda on the leading min(n, d) diagonal.
inline CorrectionMatrix identity_correction(std::size_t n, std::size_t d, double lambda) {
    const CorrectionSpec spec = CorrectionSpec::identity(lambda);
    spec.validate();
    return CorrectionMatrix(Matrix::eye(n, d, lambda), spec);
}

/// Builds C for a given spec; ExactSvd needs the tokens, IdentityScaled only their shape.
inline CorrectionMatrix make_correction(const CorrectionSpec& spec, const Matrix& x) {
    spec.validate();
    return spec.kind == CorrectionKind::ExactSvd ? exact_correction(x)
                                                 : identity_correction(x.rows(), x.cols(), spec.lambda);
}

inline Matrix apply_correction(const Matrix& x, const CorrectionMatrix& c) {
    if (!x.same_shape(c.matrix())) {
        throw DimensionError("apply_correction: tokens " + x.shape_string() + " vs correction " +
                             c.matrix().shape_string());
    }
    return x + c.matrix();
}

/// The same C is added to every sample of the batch.
inline std::vector<Matrix> apply_correction(std::span<const Matrix> batch, const CorrectionMatrix& c) {
    std::vector<Matrix> out;
    out.reserve(batch.size());
    for (const auto& x : batch) out.push_back(apply_correction(x, c));
    return out;
}

// ---------------------------------------------------------------------------
// Single-head attention products, as plain matrix algebra.

inline Matrix attention_scores(const Matrix& x, const Matrix& wq, const Matrix& wk) {
    return matmul(matmul(x, wq), transpose(matmul(x, wk)));
}

inline Matrix linear_attention_product(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv) {
    return matmul(attention_scores(x, wq, wk), matmul(x, wv));
}

inline Matrix softmax_attention_product(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv) {
    return matmul(softmax_rows(attention_scores(x, wq, wk)), matmul(x, wv));
}

// ---------------------------------------------------------------------------
// mu measures

struct MuReport {
    double kappa_x = 0.0;
    double kappa_wv = 0.0;
    std::optional<double> kappa_wq;
    std::optional<double> kappa_wk;
    std::optional<double> kappa_softmax_factor;
    std::optional<double> mu_linear;
    std::optional<double> mu_softmax;
};

namespace detail {
inline void require_attention_shapes(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv) {
    if (wq.rows() != x.cols() || wk.rows() != x.cols() || wv.rows() != x.cols() ||
        !wq.same_shape(wk)) {
        throw DimensionError("attention weights " + wq.shape_string() + ", " + wk.shape_string() +
                             ", " + wv.shape_string() + " incompatible with tokens " + x.shape_string());
    }
}
}  // namespace detail

inline MuReport mu_linear(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv) {
    detail::require_attention_shapes(x, wq, wk, wv);
    MuReport r;
    r.kappa_x = kappa_or_throw(x, "X");
    r.kappa_wq = kappa_or_throw(wq, "W_Q");
    r.kappa_wk = kappa_or_throw(wk, "W_K");
    r.kappa_wv = kappa_or_throw(wv, "W_V");
    r.mu_linear = *r.kappa_wq * *r.kappa_wk * r.kappa_wv * r.kappa_x * r.kappa_x * r.kappa_x;
    return r;
}

inline MuReport mu_softmax(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv) {
    detail::require_attention_shapes(x, wq, wk, wv);
    MuReport r;
    r.kappa_x = kappa_or_throw(x, "X");
    r.kappa_wv = kappa_or_throw(wv, "W_V");
    r.kappa_softmax_factor = kappa_or_throw(softmax_rows(attention_scores(x, wq, wk)), "softmax factor");
    r.mu_softmax = *r.kappa_softmax_factor * r.kappa_x * r.kappa_wv;
    return r;
}

inline MuReport mu_both(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv) {
    MuReport r = mu_linear(x, wq, wk, wv);
    const MuReport s = mu_softmax(x, wq, wk, wv);
    r.kappa_softmax_factor = s.kappa_softmax_factor;
    r.mu_softmax = s.mu_softmax;
    return r;
}

// ---------------------------------------------------------------------------
// Checks of the attention bounds and of mu monotonicity under correction.

inline constexpr double kBoundSlack = 1e-9;

struct AttentionBoundCheck {
    bool skipped = false;
    std::string reason;
    double kappa_linear = 0.0;   // actual k(LA(X))
    double mu_linear = 0.0;
    bool linear_pass = false;
    double kappa_softmax = 0.0;  // actual k(A(X))
    double mu_softmax = 0.0;
    bool softmax_pass = false;
};

/// Evaluates both sides of k(LA(X)) <= mu_linear and k(A(X)) <= mu_softmax.
/// Rank deficiency anywhere yields a skipped record rather than an error.
inline AttentionBoundCheck check_attention_bounds(const Matrix& x, const Matrix& wq, const Matrix& wk,
                                                  const Matrix& wv) {
    AttentionBoundCheck rec;
    try {
        const MuReport mu = mu_both(x, wq, wk, wv);
        rec.kappa_linear = kappa_or_throw(linear_attention_product(x, wq, wk, wv), "LA(X)");
        rec.kappa_softmax = kappa_or_throw(softmax_attention_product(x, wq, wk, wv), "A(X)");
        rec.mu_linear = *mu.mu_linear;
        rec.mu_softmax = *mu.mu_softmax;
        rec.linear_pass = rec.kappa_linear <= rec.mu_linear * (1 + kBoundSlack);
        rec.softmax_pass = rec.kappa_softmax <= rec.mu_softmax * (1 + kBoundSlack);
    } catch (const RankDeficientError& e) {
        rec.skipped = true;
        rec.reason = e.what();
    }
    return rec;
}

struct MonotonicityCheck {
    bool skipped = false;
    std::string reason;
    CorrectionSpec spec;
    double kappa_x_before = 0.0;
    double kappa_x_after = 0.0;
    double mu_linear_before = 0.0;
    double mu_linear_after = 0.0;
    double softmax_factor_before = 0.0;
    double softmax_factor_after = 0.0;
    double mu_softmax_before = 0.0;
    double mu_softmax_after = 0.0;
    // k(softmax((X+C)..)) <= k(softmax(X..)), the hypothesis under which
    // mu_softmax is expected to drop.
    bool softmax_assumption = false;
    bool linear_decreased = false;
    // Only ExactSvd guarantees linear_decreased.
    bool linear_guaranteed = false;
    bool linear_pass = false;
    // Set when only the softmax factor is rank deficient; the linear fields
    // are still valid and softmax_pass is vacuously true.
    bool softmax_skipped = false;
    bool softmax_decreased = false;
    bool softmax_pass = false;  // softmax_assumption implies softmax_decreased
};

inline MonotonicityCheck check_mu_monotonicity(const Matrix& x, const Matrix& wq, const Matrix& wk,
                                               const Matrix& wv, const CorrectionSpec& spec) {
    MonotonicityCheck rec;
    rec.spec = spec;
    try {
        const CorrectionMatrix c = make_correction(spec, x);
        const Matrix xc = apply_correction(x, c);
        const MuReport before = mu_linear(x, wq, wk, wv);
        const MuReport after = mu_linear(xc, wq, wk, wv);
        rec.kappa_x_before = before.kappa_x;
        rec.kappa_x_after = after.kappa_x;
        rec.mu_linear_before = *before.mu_linear;
        rec.mu_linear_after = *after.mu_linear;
        rec.linear_decreased = rec.mu_linear_after <= rec.mu_linear_before * (1 + kBoundSlack);
        rec.linear_guaranteed = spec.kind == CorrectionKind::ExactSvd;
        rec.linear_pass = rec.linear_decreased || !rec.linear_guaranteed;
        try {
            const MuReport sb = mu_softmax(x, wq, wk, wv);
            const MuReport sa = mu_softmax(xc, wq, wk, wv);
            rec.softmax_factor_before = *sb.kappa_softmax_factor;
            rec.softmax_factor_after = *sa.kappa_softmax_factor;
            rec.mu_softmax_before = *sb.mu_softmax;
            rec.mu_softmax_after = *sa.mu_softmax;
            rec.softmax_assumption = rec.softmax_factor_after <= rec.softmax_factor_before;
            rec.softmax_decreased = rec.mu_softmax_after <= rec.mu_softmax_before * (1 + kBoundSlack);
            rec.softmax_pass = !rec.softmax_assumption || rec.softmax_decreased;
        } catch (const RankDeficientError& e) {
            rec.softmax_skipped = true;
            rec.softmax_pass = true;
            rec.reason = e.what();
        }
    } catch (const RankDeficientError& e) {
        rec.skipped = true;
        rec.reason = e.what();
    }
    return rec;
}

// ---------------------------------------------------------------------------
// lambda * I_k diagnostics

/// "sigma_k(X) << 1" for the diagnostic flag.
inline constexpr double kSmallSigmaThreshold = 0.1;

struct WeylDiagnostic {
    double lambda = 0.0;
    double sigma_max = 0.0;  // of X
    double sigma_min = 0.0;  // of X
    double kappa_corrected = 0.0;  // k(X + lambda I_k)
    bool small_sigma_assumption = false;
    bool bound_applies = false;  // lambda > sigma_max
    std::optional<double> bound;  // (sigma_max + lambda) / (lambda - sigma_max)
    bool bound_satisfied = false;
    bool within_two = false;
};

/// Weyl: sigma_1(X + lambda I_k) <= sigma_1(X) + lambda and
/// sigma_k(X + lambda I_k) >= lambda - sigma_1(X), hence the bound when
/// lambda > sigma_1(X).
inline WeylDiagnostic weyl_diagnostic(const Matrix& x, double lambda) {
    const CorrectionMatrix c = identity_correction(x.rows(), x.cols(), lambda);
    const auto sx = singular_values(x);
    const auto cond = condition_number(apply_correction(x, c));
    WeylDiagnostic d;
    d.lambda = lambda;
    d.sigma_max = sx.front();
    d.sigma_min = sx.back();
    d.kappa_corrected = cond.kappa;
    d.small_sigma_assumption = d.sigma_min < kSmallSigmaThreshold;
    d.bound_applies = lambda > d.sigma_max;
    if (d.bound_applies) {
        d.bound = (d.sigma_max + lambda) / (lambda - d.sigma_max);
        d.bound_satisfied = d.kappa_corrected <= *d.bound * (1 + kBoundSlack);
    }
    d.within_two = d.kappa_corrected <= 2.0;
    return d;
}

struct SweepRow {
    double lambda = 0.0;
    double kappa = 0.0;
    friend bool operator==(const SweepRow&, const SweepRow&) = default;
};

inline std::vector<double> default_lambda_grid() {
    std::vector<double> g;
    for (int l = 1; l <= 20; ++l) g.push_back(l);
    return g;
}

/// k(X + lambda I_k) for each lambda, in input order.
inline std::vector<SweepRow> lambda_sweep(const Matrix& x, std::span<const double> lambdas) {
    if (lambdas.empty()) throw InvalidArgument("lambda_sweep: empty lambda list");
    for (double l : lambdas) CorrectionSpec::identity(l).validate();
    std::vector<SweepRow> rows;
    rows.reserve(lambdas.size());
    for (double l : lambdas) {
        const auto c = identity_correction(x.rows(), x.cols(), l);
        rows.push_back({l, condition_number(apply_correction(x, c)).kappa});
    }
    return rows;
}

inline std::string sweep_to_csv(std::span<const SweepRow> rows) {
    std::string out = "lambda,kappa\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", r.lambda, r.kappa);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Memory and FLOP overhead of storing and adding C for a batch, at 4 bytes
// per float32 entry. For B = 1024, N = 197, d = 768 this is 619,708,416
// bytes (about 0.58 GiB, commonly quoted as "0.5 GB").

struct OverheadReport {
    std::uint64_t batch_size = 0;
    std::uint64_t seq_len = 0;
    std::uint64_t embed_dim = 0;
    std::uint64_t bytes = 0;
    std::uint64_t flops = 0;
};

inline OverheadReport overhead_report(std::int64_t batch, std::int64_t seq, std::int64_t dim) {
    if (batch <= 0 || seq <= 0 || dim <= 0) {
        throw InvalidArgument("overhead: batch, seq and dim must be positive");
    }
    OverheadReport r;
    r.batch_size = static_cast<std::uint64_t>(batch);
    r.seq_len = static_cast<std::uint64_t>(seq);
    r.embed_dim = static_cast<std::uint64_t>(dim);
    r.flops = r.batch_size * r.seq_len * r.embed_dim;
    r.bytes = 4 * r.flops;
    return r;
}

// ---------------------------------------------------------------------------
// JSON (flat objects, snake_case keys; non-finite values become null)

using Json = nlohmann::ordered_json;

namespace detail {
inline Json num(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }
inline Json num(const std::optional<double>& v) { return v ? num(*v) : Json(nullptr); }
}  // namespace detail

inline Json to_json(const ConditionReport& r) {
    return {{"kappa", detail::num(r.kappa)},
            {"sigma_max", r.sigma_max},
            {"sigma_min", r.sigma_min},
            {"rank_deficient", r.rank_deficient}};
}

inline Json to_json(const MuReport& r) {
    return {{"mu_linear", detail::num(r.mu_linear)},
            {"mu_softmax", detail::num(r.mu_softmax)},
            {"kappa_x", detail::num(r.kappa_x)},
            {"kappa_wq", detail::num(r.kappa_wq)},
            {"kappa_wk", detail::num(r.kappa_wk)},
            {"kappa_wv", detail::num(r.kappa_wv)},
            {"kappa_softmax_factor", detail::num(r.kappa_softmax_factor)}};
}

inline Json to_json(const AttentionBoundCheck& r) {
    return {{"skipped", r.skipped},           {"reason", r.reason},
            {"kappa_linear", r.kappa_linear}, {"mu_linear", detail::num(r.mu_linear)},
            {"linear_pass", r.linear_pass},   {"kappa_softmax", r.kappa_softmax},
            {"mu_softmax", detail::num(r.mu_softmax)}, {"softmax_pass", r.softmax_pass}};
}

inline Json to_json(const MonotonicityCheck& r) {
    Json j{{"skipped", r.skipped},
            {"reason", r.reason},
            {"correction_kind", to_string(r.spec.kind)},
            {"lambda", r.spec.lambda},
            {"kappa_x_before", r.kappa_x_before},
            {"kappa_x_after", r.kappa_x_after},
            {"mu_linear_before", detail::num(r.mu_linear_before)},
            {"mu_linear_after", detail::num(r.mu_linear_after)},
            {"softmax_factor_before", r.softmax_factor_before},
            {"softmax_factor_after", r.softmax_factor_after},
            {"mu_softmax_before", detail::num(r.mu_softmax_before)},
            {"mu_softmax_after", detail::num(r.mu_softmax_after)},
            {"softmax_assumption", r.softmax_assumption},
            {"linear_decreased", r.linear_decreased},
            {"linear_guaranteed", r.linear_guaranteed},
            {"linear_pass", r.linear_pass},
            {"softmax_skipped", r.softmax_skipped},
            {"softmax_decreased", r.softmax_decreased},
            {"softmax_pass", r.softmax_pass}};
    if (r.softmax_skipped) {
        for (const char* key : {"softmax_factor_before", "softmax_factor_after", "mu_softmax_before", "mu_softmax_after"})
            j[key] = nullptr;
    }
    return j;
}

inline Json to_json(const WeylDiagnostic& d) {
    return {{"lambda", d.lambda},
            {"sigma_max", d.sigma_max},
            {"sigma_min", d.sigma_min},
            {"kappa_corrected", detail::num(d.kappa_corrected)},
            {"small_sigma_assumption", d.small_sigma_assumption},
            {"bound_applies", d.bound_applies},
            {"bound", detail::num(d.bound)},
            {"bound_satisfied", d.bound_satisfied},
            {"within_two", d.within_two}};
}

inline Json to_json(const OverheadReport& r) {
    return {{"batch_size", r.batch_size}, {"seq_len", r.seq_len}, {"embed_dim", r.embed_dim},
            {"bytes", r.bytes},           {"flops", r.flops}};
}

}  // namespace condtok
