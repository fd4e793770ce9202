#pragma once

// A minimal transformer over embedded tokens:
//
//   X    = tokens E^T + P (+ C)
//   T(X) = F(MHA(X) + X),   F(Y) = Y + GELU(Y W1 + b1) W2 + b2
//
// with MHA the column-wise concatenation of h heads, each either linear
// (X W_Q W_K^T X^T X W_V) or softmax (softmax(X W_Q W_K^T X^T) X W_V).
// Optional pre-layer-norm is applied to the attention and feedforward
// inputs. There is no score temperature unless score_scaling is set.
//
// The forward pass is written once against an "ops" backend. PlainOps
// evaluates on matrices; the reverse-mode tape in autodiff.hpp provides the
// same interface over recorded variables.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "condtok/conditioning.hpp"
#include "condtok/error.hpp"
#include "condtok/kv.hpp"
#include "condtok/matrix.hpp"
#include "condtok/rng.hpp"
#include "condtok/svd.hpp"

namespace condtok {

enum class AttentionKind { Linear, Softmax };

inline const char* to_string(AttentionKind k) { return k == AttentionKind::Linear ? "linear" : "softmax"; }

inline AttentionKind parse_attention_kind(const std::string& s) {
    if (s == "linear") return AttentionKind::Linear;
    if (s == "softmax") return AttentionKind::Softmax;
    throw ParseError("attention kind must be 'linear' or 'softmax', got '" + s + "'");
}

inline constexpr double kLayerNormEps = 1e-5;

struct ModelConfig {
    std::size_t seq_len = 16;    // N
    std::size_t token_dim = 8;   // t
    std::size_t embed_dim = 32;  // d
    std::size_t heads = 4;       // h
    std::size_t layers = 2;      // L
    std::size_t ff_multiplier = 4;
    AttentionKind attention = AttentionKind::Softmax;
    bool layer_norm = false;
    bool score_scaling = false;  // divide scores by sqrt(d_h)
    std::optional<CorrectionSpec> correction;

    std::size_t head_dim() const noexcept { return heads ? embed_dim / heads : 0; }
    std::size_t ff_hidden() const noexcept { return ff_multiplier * embed_dim; }

    void validate() const {
        if (!seq_len || !token_dim || !embed_dim || !heads || !layers || !ff_multiplier) {
            throw InvalidArgument("model dimensions must all be positive");
        }
        if (embed_dim % heads != 0) {
            throw InvalidArgument("heads (" + std::to_string(heads) + ") must divide embed_dim (" +
                                  std::to_string(embed_dim) + ")");
        }
        if (correction) correction->validate();
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline std::string correction_name(const std::optional<CorrectionSpec>& c) {
    return c ? to_string(c->kind) : "none";
}

inline void write_kv(std::string& out, const ModelConfig& c) {
    out += "seq_len=" + std::to_string(c.seq_len) + "\n";
    out += "token_dim=" + std::to_string(c.token_dim) + "\n";
    out += "embed_dim=" + std::to_string(c.embed_dim) + "\n";
    out += "heads=" + std::to_string(c.heads) + "\n";
    out += "layers=" + std::to_string(c.layers) + "\n";
    out += "ff_multiplier=" + std::to_string(c.ff_multiplier) + "\n";
    out += std::string("attention=") + to_string(c.attention) + "\n";
    out += std::string("layer_norm=") + (c.layer_norm ? "true" : "false") + "\n";
    out += std::string("score_scaling=") + (c.score_scaling ? "true" : "false") + "\n";
    out += "correction=" + correction_name(c.correction) + "\n";
    if (c.correction) out += "lambda=" + format_real(c.correction->lambda) + "\n";
}

inline std::string to_kv(const ModelConfig& c) {
    std::string out;
    write_kv(out, c);
    return out;
}

inline ModelConfig model_config_from_kv(const KeyValues& kv) {
    ModelConfig c;
    c.seq_len = kv.get_count("seq_len", c.seq_len);
    c.token_dim = kv.get_count("token_dim", c.token_dim);
    c.embed_dim = kv.get_count("embed_dim", c.embed_dim);
    c.heads = kv.get_count("heads", c.heads);
    c.layers = kv.get_count("layers", c.layers);
    c.ff_multiplier = kv.get_count("ff_multiplier", c.ff_multiplier);
    c.attention = parse_attention_kind(kv.get_string("attention", to_string(c.attention)));
    c.layer_norm = kv.get_bool("layer_norm", c.layer_norm);
    c.score_scaling = kv.get_bool("score_scaling", c.score_scaling);
    const std::string corr = kv.get_string("correction", "none");
    const double lambda = kv.get_real("lambda", 10.0);
    if (corr == "exact") {
        c.correction = CorrectionSpec::exact();
    } else if (corr == "identity") {
        c.correction = CorrectionSpec::identity(lambda);
    } else if (corr != "none") {
        throw ParseError("correction must be none, exact or identity, got '" + corr + "'");
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Parameters, generic over the value type so the tape can mirror them.

template <class T>
struct BasicAttentionHead {
    T wq, wk, wv;  // d x d_h each
};

template <class T>
struct BasicFeedForward {
    T w1, b1, w2, b2;  // d x m, 1 x m, m x d, 1 x d
};

template <class T>
struct BasicLayerNorm {
    T gamma, beta;  // 1 x d
};

template <class T>
struct BasicLayer {
    std::vector<BasicAttentionHead<T>> heads;
    BasicFeedForward<T> ff;
    std::optional<BasicLayerNorm<T>> norm_attn;
    std::optional<BasicLayerNorm<T>> norm_ff;
};

template <class T>
struct BasicParameters {
    T embedding;  // E, d x t
    std::vector<BasicLayer<T>> layers;
};

using AttentionHead = BasicAttentionHead<Matrix>;
using FeedForward = BasicFeedForward<Matrix>;
using TransformerLayer = BasicLayer<Matrix>;
using Parameters = BasicParameters<Matrix>;

/// Calls fn(name, value) on every trainable parameter in a fixed order.
template <class P, class Fn>
void for_each_parameter(P& params, Fn&& fn) {
    fn(std::string("embedding"), params.embedding);
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        auto& layer = params.layers[l];
        const std::string prefix = "layer" + std::to_string(l) + ".";
        for (std::size_t h = 0; h < layer.heads.size(); ++h) {
            const std::string hp = prefix + "head" + std::to_string(h) + ".";
            fn(hp + "wq", layer.heads[h].wq);
            fn(hp + "wk", layer.heads[h].wk);
            fn(hp + "wv", layer.heads[h].wv);
        }
        if (layer.norm_attn) {
            fn(prefix + "norm_attn.gamma", layer.norm_attn->gamma);
            fn(prefix + "norm_attn.beta", layer.norm_attn->beta);
        }
        fn(prefix + "ff.w1", layer.ff.w1);
        fn(prefix + "ff.b1", layer.ff.b1);
        fn(prefix + "ff.w2", layer.ff.w2);
        fn(prefix + "ff.b2", layer.ff.b2);
        if (layer.norm_ff) {
            fn(prefix + "norm_ff.gamma", layer.norm_ff->gamma);
            fn(prefix + "norm_ff.beta", layer.norm_ff->beta);
        }
    }
}

template <class P>
std::vector<std::string> parameter_names(P& params) {
    std::vector<std::string> names;
    for_each_parameter(params, [&](const std::string& n, auto&) { names.push_back(n); });
    return names;
}

struct EmbeddingLayer {
    Matrix e;  // d x t, trainable
    Matrix p;  // N x d, fixed positional encoding
};

/// Fixed sinusoidal positional encoding: P[n][2i] = sin(n / 10000^(2i/d)),
/// P[n][2i+1] = cos(n / 10000^(2i/d)).
inline Matrix sinusoidal_positional_encoding(std::size_t n, std::size_t d) {
    Matrix p(n, d);
    for (std::size_t pos = 0; pos < n; ++pos) {
        for (std::size_t j = 0; j < d; ++j) {
            const double rate = std::pow(10000.0, static_cast<double>(2 * (j / 2)) / static_cast<double>(d));
            const double angle = static_cast<double>(pos) / rate;
            p(pos, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return p;
}

struct Model {
    ModelConfig config;
    Parameters params;
    Matrix positional;
    std::optional<CorrectionMatrix> correction;

    EmbeddingLayer embedding_layer() const { return {params.embedding, positional}; }
};

/// Weights i.i.d. uniform in [-1/sqrt(d), 1/sqrt(d)], biases zero, layer-norm
/// gains one. Each matrix draws from its own stream of `seed`.
inline Model init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    const std::size_t d = config.embed_dim, dh = config.head_dim(), m = config.ff_hidden();
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    auto draw = [&](std::size_t rows, std::size_t cols, const char* label, std::uint64_t index) {
        Rng rng = Rng::stream(seed, label, index);
        return Matrix::random_uniform(rows, cols, -bound, bound, rng);
    };

    Model model;
    model.config = config;
    model.positional = sinusoidal_positional_encoding(config.seq_len, d);
    model.params.embedding = draw(d, config.token_dim, "embedding", 0);
    for (std::size_t l = 0; l < config.layers; ++l) {
        TransformerLayer layer;
        for (std::size_t h = 0; h < config.heads; ++h) {
            const std::uint64_t idx = l * config.heads + h;
            layer.heads.push_back({draw(d, dh, "wq", idx), draw(d, dh, "wk", idx), draw(d, dh, "wv", idx)});
        }
        layer.ff = {draw(d, m, "ff.w1", l), Matrix(1, m), draw(m, d, "ff.w2", l), Matrix(1, d)};
        if (config.layer_norm) {
            layer.norm_attn = BasicLayerNorm<Matrix>{Matrix(1, d, std::vector<double>(d, 1.0)), Matrix(1, d)};
            layer.norm_ff = BasicLayerNorm<Matrix>{Matrix(1, d, std::vector<double>(d, 1.0)), Matrix(1, d)};
        }
        model.params.layers.push_back(std::move(layer));
    }
    return model;
}

// ---------------------------------------------------------------------------
// Elementwise helpers shared by both backends.

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_derivative(double x) {
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

// ---------------------------------------------------------------------------
// Plain evaluation backend.

struct PlainOps {
    using Value = Matrix;
    static constexpr bool traceable = true;

    Matrix constant(const Matrix& m) const { return m; }
    std::size_t cols(const Matrix& m) const { return m.cols(); }
    Matrix matmul(const Matrix& a, const Matrix& b) const { return condtok::matmul(a, b); }
    Matrix transpose(const Matrix& a) const { return condtok::transpose(a); }
    Matrix add(const Matrix& a, const Matrix& b) const { return a + b; }
    Matrix scale(const Matrix& a, double s) const { return a * s; }
    Matrix softmax_rows(const Matrix& a) const { return condtok::softmax_rows(a); }
    Matrix hconcat(const std::vector<Matrix>& parts) const { return condtok::hconcat(parts); }

    Matrix add_row(const Matrix& a, const Matrix& row) const {
        if (row.rows() != 1 || row.cols() != a.cols()) {
            throw DimensionError("add_row: " + row.shape_string() + " does not broadcast over " + a.shape_string());
        }
        Matrix out = a;
        for (std::size_t i = 0; i < out.rows(); ++i)
            for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += row(0, j);
        out.check_finite("add_row");
        return out;
    }

    Matrix gelu(const Matrix& a) const {
        Matrix out = a;
        for (double& v : out.data()) v = condtok::gelu(v);
        return out;
    }

    Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta) const {
        Matrix out(x.rows(), x.cols());
        const double n = static_cast<double>(x.cols());
        for (std::size_t i = 0; i < x.rows(); ++i) {
            double mean = 0.0;
            for (double v : x.row(i)) mean += v;
            mean /= n;
            double var = 0.0;
            for (double v : x.row(i)) var += (v - mean) * (v - mean);
            var /= n;
            const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
            for (std::size_t j = 0; j < x.cols(); ++j)
                out(i, j) = (x(i, j) - mean) * inv * gamma(0, j) + beta(0, j);
        }
        out.check_finite("layer_norm");
        return out;
    }
};

// ---------------------------------------------------------------------------
// Forward pass, generic over the backend.

struct HeadTrace {
    Matrix output;                       // N x d_h attention output
    std::optional<Matrix> probabilities; // N x N, softmax heads only
};

struct LayerTrace {
    std::vector<HeadTrace> heads;
};

template <class Ops>
typename Ops::Value embed_tokens(Ops& ops, const Matrix& tokens, const typename Ops::Value& e,
                                 const Matrix& positional, const typename Ops::Value* correction) {
    auto x = ops.add(ops.matmul(ops.constant(tokens), ops.transpose(e)), ops.constant(positional));
    // The correction goes in after the positional encoding.
    if (correction) x = ops.add(x, *correction);
    return x;
}

template <class Ops>
typename Ops::Value head_forward(Ops& ops, const typename Ops::Value& x,
                                 const BasicAttentionHead<typename Ops::Value>& head, AttentionKind kind,
                                 bool score_scaling, HeadTrace* trace = nullptr) {
    auto q = ops.matmul(x, head.wq);
    auto k = ops.matmul(x, head.wk);
    auto v = ops.matmul(x, head.wv);
    auto scores = ops.matmul(q, ops.transpose(k));
    if (score_scaling) scores = ops.scale(scores, 1.0 / std::sqrt(static_cast<double>(ops.cols(v))));
    if (kind == AttentionKind::Linear) {
        auto out = ops.matmul(scores, v);
        if constexpr (Ops::traceable) {
            if (trace) trace->output = out;
        }
        return out;
    }
    auto probs = ops.softmax_rows(scores);
    auto out = ops.matmul(probs, v);
    if constexpr (Ops::traceable) {
        if (trace) {
            trace->output = out;
            trace->probabilities = probs;
        }
    }
    return out;
}

template <class Ops>
typename Ops::Value multi_head_forward(Ops& ops, const typename Ops::Value& x,
                                       const std::vector<BasicAttentionHead<typename Ops::Value>>& heads,
                                       AttentionKind kind, bool score_scaling, LayerTrace* trace = nullptr) {
    if (heads.empty()) throw DimensionError("multi_head: no heads");
    std::vector<typename Ops::Value> outs;
    outs.reserve(heads.size());
    if (trace) trace->heads.assign(heads.size(), {});
    for (std::size_t h = 0; h < heads.size(); ++h)
        outs.push_back(head_forward(ops, x, heads[h], kind, score_scaling, trace ? &trace->heads[h] : nullptr));
    return ops.hconcat(outs);
}

/// GELU(y W1 + b1) W2 + b2, without the residual.
template <class Ops>
typename Ops::Value feed_forward_core(Ops& ops, const typename Ops::Value& y,
                                      const BasicFeedForward<typename Ops::Value>& ff) {
    auto hidden = ops.gelu(ops.add_row(ops.matmul(y, ff.w1), ff.b1));
    return ops.add_row(ops.matmul(hidden, ff.w2), ff.b2);
}

template <class Ops>
typename Ops::Value layer_forward(Ops& ops, const typename Ops::Value& x, const BasicLayer<typename Ops::Value>& layer,
                                  const ModelConfig& config, LayerTrace* trace = nullptr) {
    const auto& attn_in = layer.norm_attn ? ops.layer_norm(x, layer.norm_attn->gamma, layer.norm_attn->beta) : x;
    auto h = ops.add(multi_head_forward(ops, attn_in, layer.heads, config.attention, config.score_scaling, trace), x);
    // Pre-norm: the residual carries h, the feedforward sees LN(h).
    if (!layer.norm_ff) return ops.add(h, feed_forward_core(ops, h, layer.ff));
    return ops.add(h, feed_forward_core(ops, ops.layer_norm(h, layer.norm_ff->gamma, layer.norm_ff->beta), layer.ff));
}

template <class Ops>
typename Ops::Value model_forward(Ops& ops, const BasicParameters<typename Ops::Value>& params,
                                  const ModelConfig& config, const Matrix& tokens, const Matrix& positional,
                                  const typename Ops::Value* correction, std::vector<LayerTrace>* traces = nullptr) {
    auto x = embed_tokens(ops, tokens, params.embedding, positional, correction);
    if (traces) traces->assign(params.layers.size(), {});
    for (std::size_t l = 0; l < params.layers.size(); ++l)
        x = layer_forward(ops, x, params.layers[l], config, traces ? &(*traces)[l] : nullptr);
    return x;
}

// ---------------------------------------------------------------------------
// Plain entry points.

inline Matrix embed(const Matrix& tokens, const EmbeddingLayer& layer, const CorrectionMatrix* correction = nullptr) {
    if (tokens.cols() != layer.e.cols() || layer.p.rows() != tokens.rows() || layer.p.cols() != layer.e.rows()) {
        throw DimensionError("embed: tokens " + tokens.shape_string() + ", E " + layer.e.shape_string() + ", P " +
                             layer.p.shape_string());
    }
    if (correction && !correction->matrix().same_shape(layer.p)) {
        throw DimensionError("embed: correction " + correction->matrix().shape_string() + " vs tokens " +
                             layer.p.shape_string());
    }
    PlainOps ops;
    return embed_tokens(ops, tokens, layer.e, layer.p, correction ? &correction->matrix() : nullptr);
}

namespace detail {
inline void require_head_shapes(const Matrix& x, const AttentionHead& head) {
    if (head.wq.rows() != x.cols() || !head.wq.same_shape(head.wk) || !head.wq.same_shape(head.wv)) {
        throw DimensionError("attention head " + head.wq.shape_string() + "/" + head.wk.shape_string() + "/" +
                             head.wv.shape_string() + " incompatible with input " + x.shape_string());
    }
}
}  // namespace detail

inline Matrix linear_attention(const Matrix& x, const AttentionHead& head) {
    detail::require_head_shapes(x, head);
    PlainOps ops;
    return head_forward(ops, x, head, AttentionKind::Linear, false);
}

inline Matrix softmax_attention(const Matrix& x, const AttentionHead& head, bool score_scaling = false) {
    detail::require_head_shapes(x, head);
    PlainOps ops;
    return head_forward(ops, x, head, AttentionKind::Softmax, score_scaling);
}

inline Matrix multi_head(const Matrix& x, const std::vector<AttentionHead>& heads, AttentionKind kind,
                         bool score_scaling = false) {
    for (const auto& h : heads) detail::require_head_shapes(x, h);
    PlainOps ops;
    return multi_head_forward(ops, x, heads, kind, score_scaling);
}

inline Matrix layer_forward(const Matrix& x, const TransformerLayer& layer, const ModelConfig& config,
                            LayerTrace* trace = nullptr) {
    if (x.cols() != config.embed_dim) {
        throw DimensionError("layer_forward: input " + x.shape_string() + " but embed_dim " +
                             std::to_string(config.embed_dim));
    }
    for (const auto& h : layer.heads) detail::require_head_shapes(x, h);
    PlainOps ops;
    return layer_forward(ops, x, layer, config, trace);
}

/// Embedded tokens (with the model's correction, if any).
inline Matrix embed(const Model& model, const Matrix& tokens) {
    const auto layer = model.embedding_layer();
    return embed(tokens, layer, model.correction ? &*model.correction : nullptr);
}

/// Runs the layer stack on already-embedded tokens.
inline Matrix forward_embedded(const Model& model, const Matrix& x, std::vector<LayerTrace>* traces = nullptr) {
    if (traces) traces->assign(model.params.layers.size(), {});
    Matrix h = x;
    for (std::size_t l = 0; l < model.params.layers.size(); ++l)
        h = layer_forward(h, model.params.layers[l], model.config, traces ? &(*traces)[l] : nullptr);
    return h;
}

inline Matrix forward(const Model& model, const Matrix& tokens) { return forward_embedded(model, embed(model, tokens)); }

// ---------------------------------------------------------------------------
// Condition probe: kappa of the tokens, of every head's attention output per
// layer, their means over heads, and the mean over layers. Rank-deficient
// entries are kept in the record but left out of every mean.

struct HeadProbe {
    double kappa = 0.0;  // attention output; +inf when skipped
    bool skipped = false;
    std::optional<double> kappa_probabilities;  // softmax heads only
};

struct LayerProbe {
    std::vector<HeadProbe> heads;
    double mean_kappa = std::numeric_limits<double>::quiet_NaN();  // NaN when all heads skipped
    std::size_t skipped = 0;
};

struct ProbeRecord {
    double kappa_tokens = 0.0;
    bool tokens_skipped = false;
    std::vector<LayerProbe> layers;
    double kappa_attn_layer1_mean = std::numeric_limits<double>::quiet_NaN();
    double kappa_attn_alllayers_mean = std::numeric_limits<double>::quiet_NaN();
};

/// Mean of the finite entries; NaN when there are none.
inline double finite_mean(const std::vector<double>& xs) {
    double total = 0.0;
    std::size_t n = 0;
    for (double v : xs) {
        if (std::isfinite(v)) {
            total += v;
            ++n;
        }
    }
    return n ? total / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

inline ProbeRecord condition_probe(const Model& model, const Matrix& x_embedded) {
    ProbeRecord rec;
    const auto tok = condition_number(x_embedded);
    rec.kappa_tokens = tok.kappa;
    rec.tokens_skipped = tok.rank_deficient;

    std::vector<LayerTrace> traces;
    forward_embedded(model, x_embedded, &traces);

    std::vector<double> layer_means;
    for (const auto& trace : traces) {
        LayerProbe lp;
        std::vector<double> ks;
        for (const auto& ht : trace.heads) {
            HeadProbe hp;
            const auto c = condition_number(ht.output);
            hp.kappa = c.kappa;
            hp.skipped = c.rank_deficient;
            if (hp.skipped) ++lp.skipped;
            if (ht.probabilities) hp.kappa_probabilities = condition_number(*ht.probabilities).kappa;
            ks.push_back(hp.skipped ? std::numeric_limits<double>::quiet_NaN() : hp.kappa);
            lp.heads.push_back(hp);
        }
        lp.mean_kappa = finite_mean(ks);
        layer_means.push_back(lp.mean_kappa);
        rec.layers.push_back(std::move(lp));
    }
    if (!rec.layers.empty()) rec.kappa_attn_layer1_mean = rec.layers.front().mean_kappa;
    rec.kappa_attn_alllayers_mean = finite_mean(layer_means);
    return rec;
}

inline Json to_json(const ProbeRecord& r) {
    Json layers = Json::array();
    for (const auto& lp : r.layers) {
        Json heads = Json::array();
        for (const auto& hp : lp.heads) {
            heads.push_back({{"kappa", detail::num(hp.kappa)},
                             {"skipped", hp.skipped},
                             {"kappa_probabilities", detail::num(hp.kappa_probabilities)}});
        }
        layers.push_back({{"mean_kappa", detail::num(lp.mean_kappa)}, {"skipped", lp.skipped}, {"heads", heads}});
    }
    return {{"kappa_tokens", detail::num(r.kappa_tokens)},
            {"tokens_skipped", r.tokens_skipped},
            {"kappa_attn_layer1_mean", detail::num(r.kappa_attn_layer1_mean)},
            {"kappa_attn_alllayers_mean", detail::num(r.kappa_attn_alllayers_mean)},
            {"layers", layers}};
}

}  // namespace condtok
