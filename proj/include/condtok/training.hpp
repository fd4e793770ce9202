#pragma once

// Desk-scale training of the attention model on synthetic tasks, with the
// condition probe run once per epoch on a fixed held-out batch.
//
// A correction, when configured, is built once at initialization (ExactSvd
// from the mean embedded probe tokens, IdentityScaled from the shape alone)
// and then held fixed: it enters the tape as a constant leaf, so it never
// receives a gradient and the optimizer never touches it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "condtok/attention.hpp"
#include "condtok/autodiff.hpp"
#include "condtok/conditioning.hpp"
#include "condtok/error.hpp"
#include "condtok/kv.hpp"
#include "condtok/matrix.hpp"
#include "condtok/rng.hpp"

namespace condtok {

// ---------------------------------------------------------------------------
// Synthetic tasks

enum class TaskKind { TeacherRegression, SequenceCopy };

inline const char* to_string(TaskKind k) { return k == TaskKind::TeacherRegression ? "teacher" : "copy"; }

inline TaskKind parse_task_kind(const std::string& s) {
    if (s == "teacher") return TaskKind::TeacherRegression;
    if (s == "copy") return TaskKind::SequenceCopy;
    throw ParseError("task must be 'teacher' or 'copy', got '" + s + "'");
}

struct SyntheticTask {
    TaskKind kind = TaskKind::TeacherRegression;
    std::uint64_t seed = 1;
    std::size_t num_samples = 32;
    std::size_t probe_samples = 8;
    double token_scale = 1.0;  // tokens are uniform in [-token_scale, token_scale]

    friend bool operator==(const SyntheticTask&, const SyntheticTask&) = default;
};

struct Dataset {
    std::vector<Matrix> inputs, targets;
    std::vector<Matrix> probe_inputs, probe_targets;
};

namespace detail {

inline std::vector<Matrix> draw_tokens(const SyntheticTask& task, const ModelConfig& cfg, const char* label,
                                       std::size_t count) {
    std::vector<Matrix> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng = Rng::stream(task.seed, label, i);
        out.push_back(Matrix::random_uniform(cfg.seq_len, cfg.token_dim, -task.token_scale, task.token_scale, rng));
    }
    return out;
}

// Copy task target: row i is token row i-1 (cyclically), zero-padded to d.
inline Matrix shifted_copy(const Matrix& tokens, std::size_t d) {
    Matrix t(tokens.rows(), d);
    for (std::size_t i = 0; i < tokens.rows(); ++i) {
        const std::size_t src = (i + tokens.rows() - 1) % tokens.rows();
        for (std::size_t j = 0; j < tokens.cols(); ++j) t(i, j) = tokens(src, j);
    }
    return t;
}

}  // namespace detail

/// Frozen, randomly initialized model that produces regression targets.
inline Model teacher_model(const SyntheticTask& task, const ModelConfig& cfg) {
    ModelConfig tc = cfg;
    tc.correction.reset();
    std::uint64_t s = task.seed ^ fnv1a("teacher");
    return init_model(tc, splitmix64(s));
}

/// Fully determined by (task, model dimensions).
inline Dataset make_dataset(const SyntheticTask& task, const ModelConfig& cfg) {
    cfg.validate();
    if (task.num_samples == 0 || task.probe_samples == 0) {
        throw InvalidArgument("task needs at least one training and one probe sample");
    }
    if (!(task.token_scale > 0.0)) throw InvalidArgument("token_scale must be positive");
    if (task.kind == TaskKind::SequenceCopy && cfg.token_dim > cfg.embed_dim) {
        throw InvalidArgument("copy task needs token_dim <= embed_dim");
    }
    Dataset ds;
    ds.inputs = detail::draw_tokens(task, cfg, "train", task.num_samples);
    ds.probe_inputs = detail::draw_tokens(task, cfg, "probe", task.probe_samples);
    auto targets_for = [&](const std::vector<Matrix>& xs) {
        std::vector<Matrix> ts;
        if (task.kind == TaskKind::TeacherRegression) {
            const Model teacher = teacher_model(task, cfg);
            for (const auto& x : xs) ts.push_back(forward(teacher, x));
        } else {
            for (const auto& x : xs) ts.push_back(detail::shifted_copy(x, cfg.embed_dim));
        }
        return ts;
    };
    ds.targets = targets_for(ds.inputs);
    ds.probe_targets = targets_for(ds.probe_inputs);
    return ds;
}

// ---------------------------------------------------------------------------
// Loss and gradients

/// Mean over the batch of the per-sample mean squared error.
inline double batch_loss(const Model& model, std::span<const Matrix> inputs, std::span<const Matrix> targets) {
    if (inputs.empty() || inputs.size() != targets.size()) throw InvalidArgument("batch_loss: bad batch");
    double total = 0.0;
    for (std::size_t b = 0; b < inputs.size(); ++b) {
        const Matrix y = forward(model, inputs[b]);
        y.require_same_shape(targets[b], "batch_loss");
        double acc = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double d = y.data()[i] - targets[b].data()[i];
            acc += d * d;
        }
        total += acc / static_cast<double>(y.size());
    }
    return total / static_cast<double>(inputs.size());
}

struct BatchGradients {
    double loss = 0.0;
    Parameters grads;               // same layout as the model's parameters
    std::optional<Matrix> correction_grad;  // adjoint reaching C; always zero
};

template <class T>
std::vector<T*> parameter_refs(BasicParameters<T>& p) {
    std::vector<T*> refs;
    for_each_parameter(p, [&](const std::string&, T& v) { refs.push_back(&v); });
    return refs;
}

template <class T>
std::vector<const T*> parameter_refs(const BasicParameters<T>& p) {
    std::vector<const T*> refs;
    for_each_parameter(p, [&](const std::string&, const T& v) { refs.push_back(&v); });
    return refs;
}

/// Exact reverse-mode gradients of batch_loss with respect to every
/// parameter. Throws NonFiniteError if the loss (or any intermediate) is not finite.
inline BatchGradients backward(const Model& model, std::span<const Matrix> inputs, std::span<const Matrix> targets) {
    if (inputs.empty() || inputs.size() != targets.size()) throw InvalidArgument("backward: bad batch");
    Tape tape;
    TapeOps ops{tape};
    const BasicParameters<Var> pv = record_parameters(tape, model.params);
    std::optional<Var> cvar;
    if (model.correction) cvar = tape.leaf(model.correction->matrix(), false);

    std::optional<Var> total;
    for (std::size_t b = 0; b < inputs.size(); ++b) {
        const Var y = model_forward(ops, pv, model.config, inputs[b], model.positional, cvar ? &*cvar : nullptr);
        const Var l = tape.mse(y, targets[b]);
        total = total ? tape.add(*total, l) : l;
    }
    const Var loss = tape.scale(*total, 1.0 / static_cast<double>(inputs.size()));
    tape.backward(loss);

    BatchGradients out;
    out.loss = tape.value(loss)(0, 0);
    if (!std::isfinite(out.loss)) throw NonFiniteError("non-finite loss");
    out.grads = model.params;
    auto dst = parameter_refs(out.grads);
    const auto src = parameter_refs(pv);
    for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] = tape.grad(*src[i]);
    if (cvar) out.correction_grad = tape.grad(*cvar);
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradientGroup {
    std::string name;
    std::size_t coordinates = 0;
    double max_rel_error = 0.0;
};

struct GradientCheckReport {
    std::vector<GradientGroup> groups;
    double max_rel_error = 0.0;
    std::optional<double> correction_grad_max_abs;  // exactly 0 when C is frozen
};

struct GradientCheckOptions {
    std::size_t coordinates_per_parameter = 32;
    double step = 1e-5;
    std::uint64_t seed = 0;  // picks the sampled coordinates
};

/// Compares analytic gradients with central differences on a sample of at
/// least `coordinates_per_parameter` entries per parameter (all of them for
/// smaller matrices). Error metric: |a - fd| / max(|a|, |fd|, 1e-12).
inline GradientCheckReport gradient_check(const Model& model, std::span<const Matrix> inputs,
                                          std::span<const Matrix> targets, const GradientCheckOptions& opts = {}) {
    const BatchGradients analytic = backward(model, inputs, targets);
    Model probe = model;
    auto params = parameter_refs(probe.params);
    const auto grads = parameter_refs(analytic.grads);
    const auto names = parameter_names(probe.params);

    GradientCheckReport report;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Matrix& w = *params[p];
        std::vector<std::size_t> coords(w.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (coords.size() > opts.coordinates_per_parameter) {
            Rng rng = Rng::stream(opts.seed, "gradcheck", p);
            for (std::size_t i = 0; i < opts.coordinates_per_parameter; ++i)
                std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
            coords.resize(opts.coordinates_per_parameter);
        }
        GradientGroup g{names[p], coords.size(), 0.0};
        for (std::size_t c : coords) {
            double& entry = w.data()[c];
            const double saved = entry;
            entry = saved + opts.step;
            const double up = batch_loss(probe, inputs, targets);
            entry = saved - opts.step;
            const double down = batch_loss(probe, inputs, targets);
            entry = saved;
            const double fd = (up - down) / (2 * opts.step);
            const double a = grads[p]->data()[c];
            const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-12});
            g.max_rel_error = std::max(g.max_rel_error, rel);
        }
        report.max_rel_error = std::max(report.max_rel_error, g.max_rel_error);
        report.groups.push_back(std::move(g));
    }
    if (analytic.correction_grad) report.correction_grad_max_abs = max_abs(*analytic.correction_grad);
    return report;
}

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { SGD, AdamW };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::SGD ? "sgd" : "adamw"; }

inline OptimizerKind parse_optimizer_kind(const std::string& s) {
    if (s == "sgd") return OptimizerKind::SGD;
    if (s == "adamw") return OptimizerKind::AdamW;
    throw ParseError("optimizer must be 'sgd' or 'adamw', got '" + s + "'");
}

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::AdamW;
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

class Optimizer {
public:
    Optimizer(const OptimizerConfig& cfg, const Parameters& params) : cfg_(cfg) {
        if (cfg.learning_rate < 0 || cfg.weight_decay < 0) throw InvalidArgument("negative learning rate or decay");
        if (cfg.kind == OptimizerKind::AdamW) {
            for (const Matrix* p : parameter_refs(params)) {
                m_.emplace_back(p->rows(), p->cols());
                v_.emplace_back(p->rows(), p->cols());
            }
        }
    }

    void step(Parameters& params, const Parameters& grads) {
        auto ps = parameter_refs(params);
        const auto gs = parameter_refs(grads);
        ++t_;
        const double lr = cfg_.learning_rate;
        for (std::size_t i = 0; i < ps.size(); ++i) {
            auto w = ps[i]->data();
            const auto g = gs[i]->data();
            if (cfg_.kind == OptimizerKind::SGD) {
                for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * (g[j] + cfg_.weight_decay * w[j]);
                continue;
            }
            auto m = m_[i].data();
            auto v = v_[i].data();
            const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
            const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
            for (std::size_t j = 0; j < w.size(); ++j) {
                w[j] -= lr * cfg_.weight_decay * w[j];
                m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * g[j];
                v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * g[j] * g[j];
                w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
            }
        }
        for (Matrix* p : ps) p->check_finite("optimizer step");
    }

private:
    OptimizerConfig cfg_;
    std::vector<Matrix> m_, v_;
    std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training configuration

struct TrainConfig {
    ModelConfig model;
    SyntheticTask task;
    OptimizerConfig optimizer;
    std::size_t epochs = 100;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;  // model initialization

    void validate() const {
        model.validate();
        if (batch_size == 0) throw InvalidArgument("batch_size must be positive");
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline std::string to_kv(const TrainConfig& c) {
    std::string out = to_kv(c.model);
    out += std::string("task=") + to_string(c.task.kind) + "\n";
    out += "task_seed=" + std::to_string(c.task.seed) + "\n";
    out += "num_samples=" + std::to_string(c.task.num_samples) + "\n";
    out += "probe_samples=" + std::to_string(c.task.probe_samples) + "\n";
    out += "token_scale=" + format_real(c.task.token_scale) + "\n";
    out += std::string("optimizer=") + to_string(c.optimizer.kind) + "\n";
    out += "learning_rate=" + format_real(c.optimizer.learning_rate) + "\n";
    out += "weight_decay=" + format_real(c.optimizer.weight_decay) + "\n";
    out += "beta1=" + format_real(c.optimizer.beta1) + "\n";
    out += "beta2=" + format_real(c.optimizer.beta2) + "\n";
    out += "eps=" + format_real(c.optimizer.eps) + "\n";
    out += "epochs=" + std::to_string(c.epochs) + "\n";
    out += "batch_size=" + std::to_string(c.batch_size) + "\n";
    out += "seed=" + std::to_string(c.seed) + "\n";
    return out;
}

inline TrainConfig train_config_from_kv(const KeyValues& kv) {
    TrainConfig c;
    c.model = model_config_from_kv(kv);
    c.task.kind = parse_task_kind(kv.get_string("task", to_string(c.task.kind)));
    c.task.seed = kv.get_count("task_seed", c.task.seed);
    c.task.num_samples = kv.get_count("num_samples", c.task.num_samples);
    c.task.probe_samples = kv.get_count("probe_samples", c.task.probe_samples);
    c.task.token_scale = kv.get_real("token_scale", c.task.token_scale);
    c.optimizer.kind = parse_optimizer_kind(kv.get_string("optimizer", to_string(c.optimizer.kind)));
    c.optimizer.learning_rate = kv.get_real("learning_rate", c.optimizer.learning_rate);
    c.optimizer.weight_decay = kv.get_real("weight_decay", c.optimizer.weight_decay);
    c.optimizer.beta1 = kv.get_real("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = kv.get_real("beta2", c.optimizer.beta2);
    c.optimizer.eps = kv.get_real("eps", c.optimizer.eps);
    c.epochs = kv.get_count("epochs", c.epochs);
    c.batch_size = kv.get_count("batch_size", c.batch_size);
    c.seed = kv.get_count("seed", c.seed);
    kv.require_all_used();
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double kappa_tokens = 0.0;               // mean over probe samples
    double kappa_attn_layer1_mean = 0.0;     // mean over probe samples of the first-layer head mean
    double kappa_attn_alllayers_mean = 0.0;  // mean over probe samples of the all-layer mean
    double kappa_tokens_reference = 0.0;     // k(mean probe embedded tokens, incl. C)
    std::vector<double> layer1_head_kappas;  // per head, mean over probe samples

    friend bool operator==(const EpochLog&, const EpochLog&) = default;
};

struct TrainResult {
    std::vector<EpochLog> logs;
    Model initial_model;
    Model model;
    bool diverged = false;
    std::string diagnostic;
};

/// Mean embedded probe tokens (including the model's correction, if any).
inline Matrix mean_embedded(const Model& model, std::span<const Matrix> tokens) {
    Matrix acc = embed(model, tokens.front());
    for (std::size_t i = 1; i < tokens.size(); ++i) acc += embed(model, tokens[i]);
    acc *= 1.0 / static_cast<double>(tokens.size());
    return acc;
}

inline EpochLog probe_epoch(const Model& model, std::span<const Matrix> probe_inputs, std::size_t epoch) {
    EpochLog log;
    log.epoch = epoch;
    std::vector<double> tok, l1, all;
    std::vector<std::vector<double>> heads(model.config.heads);
    for (const auto& tokens : probe_inputs) {
        const ProbeRecord rec = condition_probe(model, embed(model, tokens));
        tok.push_back(rec.tokens_skipped ? std::numeric_limits<double>::quiet_NaN() : rec.kappa_tokens);
        l1.push_back(rec.kappa_attn_layer1_mean);
        all.push_back(rec.kappa_attn_alllayers_mean);
        const auto& first = rec.layers.front().heads;
        for (std::size_t h = 0; h < first.size(); ++h)
            heads[h].push_back(first[h].skipped ? std::numeric_limits<double>::quiet_NaN() : first[h].kappa);
    }
    log.kappa_tokens = finite_mean(tok);
    log.kappa_attn_layer1_mean = finite_mean(l1);
    log.kappa_attn_alllayers_mean = finite_mean(all);
    for (const auto& h : heads) log.layer1_head_kappas.push_back(finite_mean(h));
    const auto ref = condition_number(mean_embedded(model, probe_inputs));
    log.kappa_tokens_reference = ref.kappa;
    return log;
}

/// Deterministic in (config). Batches are taken in dataset order.
inline TrainResult train(const TrainConfig& config) {
    config.validate();
    const Dataset data = make_dataset(config.task, config.model);

    Model model = init_model(config.model, config.seed);
    if (config.model.correction) {
        model.correction = make_correction(*config.model.correction, mean_embedded(model, data.probe_inputs));
    }

    TrainResult result;
    result.initial_model = model;
    Optimizer opt(config.optimizer, model.params);
    const std::span<const Matrix> inputs(data.inputs), targets(data.targets);

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        try {
            EpochLog log = probe_epoch(model, data.probe_inputs, epoch);
            double loss_sum = 0.0;
            std::size_t batches = 0;
            for (std::size_t start = 0; start < inputs.size(); start += config.batch_size) {
                const std::size_t n = std::min(config.batch_size, inputs.size() - start);
                const BatchGradients g = backward(model, inputs.subspan(start, n), targets.subspan(start, n));
                opt.step(model.params, g.grads);
                loss_sum += g.loss;
                ++batches;
            }
            log.train_loss = loss_sum / static_cast<double>(batches);
            if (!std::isfinite(log.train_loss)) throw NonFiniteError("non-finite epoch loss");
            result.logs.push_back(std::move(log));
        } catch (const NumericalError& e) {
            result.diverged = true;
            result.diagnostic = "epoch " + std::to_string(epoch) + ": " + e.what();
            break;
        }
    }
    result.model = std::move(model);
    return result;
}

// ---------------------------------------------------------------------------
// Baseline vs conditioned comparison

struct RunSummary {
    double kappa_tokens = 0.0;  // epoch averages
    double kappa_attn_layer1 = 0.0;
    double kappa_attn_alllayers = 0.0;
    double final_loss = std::numeric_limits<double>::quiet_NaN();
    std::size_t epochs = 0;
    bool diverged = false;
};

struct ComparisonSummary {
    RunSummary baseline;
    RunSummary conditioned;
    double ratio_kappa_tokens = 0.0;  // conditioned / baseline
    double ratio_kappa_attn_layer1 = 0.0;
    double ratio_kappa_attn_alllayers = 0.0;
};

struct Comparison {
    TrainResult baseline;
    TrainResult conditioned;
    ComparisonSummary summary;
};

inline RunSummary summarize(const TrainResult& r) {
    RunSummary s;
    std::vector<double> tok, l1, all;
    for (const auto& log : r.logs) {
        tok.push_back(log.kappa_tokens);
        l1.push_back(log.kappa_attn_layer1_mean);
        all.push_back(log.kappa_attn_alllayers_mean);
    }
    s.kappa_tokens = finite_mean(tok);
    s.kappa_attn_layer1 = finite_mean(l1);
    s.kappa_attn_alllayers = finite_mean(all);
    if (!r.logs.empty()) s.final_loss = r.logs.back().train_loss;
    s.epochs = r.logs.size();
    s.diverged = r.diverged;
    return s;
}

inline Comparison compare_runs(const TrainConfig& base, const TrainConfig& cond) {
    TrainConfig a = base, b = cond;
    a.model.correction.reset();
    b.model.correction.reset();
    if (!(a == b)) throw InvalidArgument("compare_runs: configs differ in more than the correction");
    Comparison c;
    c.baseline = train(base);
    c.conditioned = train(cond);
    c.summary.baseline = summarize(c.baseline);
    c.summary.conditioned = summarize(c.conditioned);
    c.summary.ratio_kappa_tokens = c.summary.conditioned.kappa_tokens / c.summary.baseline.kappa_tokens;
    c.summary.ratio_kappa_attn_layer1 = c.summary.conditioned.kappa_attn_layer1 / c.summary.baseline.kappa_attn_layer1;
    c.summary.ratio_kappa_attn_alllayers =
        c.summary.conditioned.kappa_attn_alllayers / c.summary.baseline.kappa_attn_alllayers;
    return c;
}

// ---------------------------------------------------------------------------
// Serialization

inline std::string logs_to_csv(std::span<const EpochLog> logs) {
    std::string out = "epoch,loss,kappa_tokens,kappa_attn_l1,kappa_attn_all\n";
    for (const auto& l : logs) {
        out += std::to_string(l.epoch) + "," + format_real(l.train_loss) + "," + format_real(l.kappa_tokens) + "," +
               format_real(l.kappa_attn_layer1_mean) + "," + format_real(l.kappa_attn_alllayers_mean) + "\n";
    }
    return out;
}

inline Json to_json(const RunSummary& s) {
    return {{"kappa_tokens", detail::num(s.kappa_tokens)},
            {"kappa_attn_layer1", detail::num(s.kappa_attn_layer1)},
            {"kappa_attn_alllayers", detail::num(s.kappa_attn_alllayers)},
            {"final_loss", detail::num(s.final_loss)},
            {"epochs", s.epochs},
            {"diverged", s.diverged}};
}

/// Flat object: baseline_* / conditioned_* / ratio_* keys.
inline Json to_json(const ComparisonSummary& s) {
    Json j = Json::object();
    for (const auto& [prefix, run] : {std::pair{"baseline_", &s.baseline}, std::pair{"conditioned_", &s.conditioned}}) {
        const Json fields = to_json(*run);
        for (const auto& [k, v] : fields.items()) j[std::string(prefix) + k] = v;
    }
    j["ratio_kappa_tokens"] = detail::num(s.ratio_kappa_tokens);
    j["ratio_kappa_attn_layer1"] = detail::num(s.ratio_kappa_attn_layer1);
    j["ratio_kappa_attn_alllayers"] = detail::num(s.ratio_kappa_attn_alllayers);
    return j;
}

inline Json to_json(const GradientCheckReport& r) {
    Json j = {{"max_rel_error", r.max_rel_error},
              {"correction_grad_max_abs", detail::num(r.correction_grad_max_abs)}};
    for (const auto& g : r.groups) j["rel_error." + g.name] = g.max_rel_error;
    return j;
}

}  // namespace condtok
