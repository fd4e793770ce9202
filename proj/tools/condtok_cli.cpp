// condtok: command-line front end for the conditioning library.
//
// Exit codes: 0 success, 1 usage / input error, 2 numerical failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "condtok/condtok.hpp"

namespace {

using condtok::Json;
using condtok::Matrix;

constexpr int kUsageError = 1;
constexpr int kNumericalError = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Failures that are reported after the output has been written.
struct ReportedFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void emit(const std::string& text, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw UsageError("cannot write '" + out_path + "'");
    out << text;
}

std::string json_text(const Json& j) { return j.dump(2) + "\n"; }

std::string csv_row(const std::vector<std::string>& cells) {
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
    return out + "\n";
}

// Flat two-line CSV from a flat JSON object.
std::string json_to_csv(const Json& j) {
    std::vector<std::string> keys, values;
    for (const auto& [k, v] : j.items()) {
        keys.push_back(k);
        if (v.is_null()) {
            values.emplace_back("");
        } else if (v.is_number_float()) {
            values.push_back(condtok::format_real(v.get<double>()));
        } else if (v.is_string()) {
            values.push_back(v.get<std::string>());
        } else {
            values.push_back(v.dump());
        }
    }
    return csv_row(keys) + csv_row(values);
}

std::string render(const Json& j, const std::string& format) {
    return format == "csv" ? json_to_csv(j) : json_text(j);
}

Json prefixed(const std::string& prefix, const Json& j, Json into = Json::object()) {
    for (const auto& [k, v] : j.items()) into[prefix + k] = v;
    return into;
}

std::vector<double> parse_grid(const std::string& spec) {
    std::vector<double> parts;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ':')) {
        std::size_t used = 0;
        double v = 0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != item.size()) throw UsageError("--grid expects lo:hi or lo:hi:step, got '" + spec + "'");
        parts.push_back(v);
    }
    if (parts.size() < 2 || parts.size() > 3) throw UsageError("--grid expects lo:hi or lo:hi:step, got '" + spec + "'");
    const double lo = parts[0], hi = parts[1], step = parts.size() == 3 ? parts[2] : 1.0;
    if (!(lo > 0) || hi < lo || !(step > 0)) throw UsageError("--grid needs 0 < lo <= hi and step > 0");
    std::vector<double> grid;
    for (std::size_t i = 0;; ++i) {
        const double l = lo + static_cast<double>(i) * step;
        if (l > hi * (1 + 1e-12)) break;
        grid.push_back(l);
    }
    return grid;
}

condtok::CorrectionSpec correction_from_flags(const std::string& kind, double lambda) {
    condtok::CorrectionSpec spec =
        kind == "exact" ? condtok::CorrectionSpec::exact() : condtok::CorrectionSpec::identity(lambda);
    spec.validate();
    return spec;
}

condtok::TrainConfig load_train_config(const std::string& path) {
    if (path.empty()) return {};
    return condtok::train_config_from_kv(condtok::KeyValues::parse_file(path));
}

void apply_seed(condtok::TrainConfig& cfg, std::uint64_t seed) {
    cfg.seed = seed;
    cfg.task.seed = seed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Condition numbers of embedded tokens and their corrections"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    std::string in, out, wq, wk, wv, config_path, out_dir, kind = "exact", grid = "1:20", format = "json";
    std::string attention = "softmax", correction = "none";
    double lambda = 10.0;
    std::int64_t batch = 0, seq = 0, dim = 0;
    std::uint64_t seed = 0;
    std::optional<std::size_t> epochs;
    bool layer_norm = false;

    auto add_format = [&](CLI::App* sub, const std::string& fallback) {
        sub->add_option("--format", format, "Output format")
            ->check(CLI::IsMember({"csv", "json"}))
            ->default_str(fallback);
    };
    auto add_in = [&](CLI::App* sub) { sub->add_option("--in", in, "Input matrix (CSV)")->required(); };

    auto* spectrum = app.add_subcommand("spectrum", "Singular values of a matrix");
    add_in(spectrum);
    add_format(spectrum, "json");

    auto* kappa = app.add_subcommand("kappa", "Condition number of a matrix");
    add_in(kappa);
    add_format(kappa, "json");

    auto* correct = app.add_subcommand("correct", "Write X + C for a correction C");
    add_in(correct);
    correct->add_option("--kind", kind, "Correction kind")->check(CLI::IsMember({"exact", "identity"}))->required();
    correct->add_option("--lambda", lambda, "Scale of lambda * I_k (identity kind)");
    correct->add_option("--out", out, "Output matrix (CSV)")->required();
    add_format(correct, "json");

    auto* mu = app.add_subcommand("mu", "Conditioning measures of linear and softmax attention");
    add_in(mu);
    mu->add_option("--wq", wq, "Query weights (CSV)")->required();
    mu->add_option("--wk", wk, "Key weights (CSV)")->required();
    mu->add_option("--wv", wv, "Value weights (CSV)")->required();
    add_format(mu, "json");

    auto* verify = app.add_subcommand("verify", "Check the attention bounds, mu monotonicity and the Weyl bound");
    add_in(verify);
    verify->add_option("--wq", wq, "Query weights (CSV)")->required();
    verify->add_option("--wk", wk, "Key weights (CSV)")->required();
    verify->add_option("--wv", wv, "Value weights (CSV)")->required();
    verify->add_option("--kind", kind, "Correction kind")->check(CLI::IsMember({"exact", "identity"}));
    verify->add_option("--lambda", lambda, "Scale of lambda * I_k");
    add_format(verify, "json");

    auto* sweep = app.add_subcommand("sweep-lambda", "k(X + lambda I_k) over a grid of lambda");
    add_in(sweep);
    sweep->add_option("--grid", grid, "lo:hi[:step], inclusive")->default_str("1:20");
    sweep->add_option("--out", out, "Output file (default stdout)");
    add_format(sweep, "csv");

    auto* overhead = app.add_subcommand("overhead", "Memory and FLOP cost of adding C to a batch");
    overhead->add_option("--batch", batch, "Batch size B")->required();
    overhead->add_option("--seq", seq, "Sequence length N")->required();
    overhead->add_option("--dim", dim, "Embedding dimension d")->required();
    add_format(overhead, "json");

    auto* gradcheck = app.add_subcommand("gradcheck", "Analytic vs finite-difference gradients on a small model");
    gradcheck->add_option("--seed", seed, "Seed for weights and data")->required();
    gradcheck->add_option("--attention", attention, "Attention kind")->check(CLI::IsMember({"linear", "softmax"}));
    gradcheck->add_flag("--layer-norm", layer_norm, "Enable pre-layer-norm");
    gradcheck->add_option("--correction", correction, "Correction")->check(CLI::IsMember({"none", "exact", "identity"}));
    gradcheck->add_option("--lambda", lambda, "Scale of lambda * I_k");
    add_format(gradcheck, "json");

    auto* train = app.add_subcommand("train", "Train on a synthetic task and log conditioning per epoch");
    train->add_option("--config", config_path, "key=value config file (defaults if omitted)");
    train->add_option("--seed", seed, "Seed for model and task")->required();
    train->add_option("--epochs", epochs, "Override the configured epoch count");
    train->add_option("--out", out, "Epoch log (default stdout)");
    add_format(train, "csv");

    auto* compare = app.add_subcommand("compare", "Baseline vs conditioned training runs");
    compare->add_option("--config", config_path, "key=value config file (defaults if omitted)");
    compare->add_option("--seed", seed, "Seed for model and task")->required();
    compare->add_option("--epochs", epochs, "Override the configured epoch count");
    compare->add_option("--out-dir", out_dir, "Directory for baseline.csv, conditioned.csv, summary.json")->required();
    compare->add_option("--kind", kind, "Correction kind when the config has none")
        ->check(CLI::IsMember({"exact", "identity"}));
    compare->add_option("--lambda", lambda, "Scale of lambda * I_k when the config has none");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsageError;
    }
    for (auto* sub : {sweep, train}) {
        if (*sub && sub->count("--format") == 0) format = "csv";
    }

    try {
        if (*spectrum) {
            const auto sigma = condtok::singular_values(condtok::read_csv_file(in));
            if (format == "csv") {
                std::string text = "index,sigma\n";
                for (std::size_t i = 0; i < sigma.size(); ++i)
                    text += std::to_string(i) + "," + condtok::format_real(sigma[i]) + "\n";
                emit(text, "");
            } else {
                emit(json_text({{"count", sigma.size()}, {"sigma", sigma}}), "");
            }
        } else if (*kappa) {
            emit(render(condtok::to_json(condtok::condition_number(condtok::read_csv_file(in))), format), "");
        } else if (*correct) {
            const Matrix x = condtok::read_csv_file(in);
            const auto spec = correction_from_flags(kind, lambda);
            const auto before = condtok::condition_number(x);
            const auto c = condtok::make_correction(spec, x);
            const Matrix xc = condtok::apply_correction(x, c);
            condtok::write_csv_file(out, xc);
            const auto after = condtok::condition_number(xc);
            Json j = {{"kind", to_string(spec.kind)}, {"lambda", spec.lambda}};
            j = prefixed("before_", condtok::to_json(before), j);
            j = prefixed("after_", condtok::to_json(after), j);
            emit(render(j, format), "");
        } else if (*mu) {
            const auto report = condtok::mu_both(condtok::read_csv_file(in), condtok::read_csv_file(wq),
                                                 condtok::read_csv_file(wk), condtok::read_csv_file(wv));
            emit(render(condtok::to_json(report), format), "");
        } else if (*verify) {
            const Matrix x = condtok::read_csv_file(in);
            const Matrix q = condtok::read_csv_file(wq), k = condtok::read_csv_file(wk), v = condtok::read_csv_file(wv);
            Json j = prefixed("bounds_", condtok::to_json(condtok::check_attention_bounds(x, q, k, v)));
            j = prefixed("monotonicity_",
                         condtok::to_json(condtok::check_mu_monotonicity(x, q, k, v, correction_from_flags(kind, lambda))),
                         j);
            j = prefixed("weyl_", condtok::to_json(condtok::weyl_diagnostic(x, lambda)), j);
            emit(render(j, format), "");
        } else if (*sweep) {
            const auto rows = condtok::lambda_sweep(condtok::read_csv_file(in), parse_grid(grid));
            if (format == "csv") {
                emit(condtok::sweep_to_csv(rows), out);
            } else {
                Json arr = Json::array();
                for (const auto& r : rows) arr.push_back({{"lambda", r.lambda}, {"kappa", condtok::detail::num(r.kappa)}});
                emit(json_text({{"rows", arr}}), out);
            }
        } else if (*overhead) {
            emit(render(condtok::to_json(condtok::overhead_report(batch, seq, dim)), format), "");
        } else if (*gradcheck) {
            condtok::ModelConfig cfg;
            cfg.seq_len = 3;
            cfg.token_dim = 3;
            cfg.embed_dim = 4;
            cfg.heads = 2;
            cfg.layers = 1;
            cfg.ff_multiplier = 2;
            cfg.attention = condtok::parse_attention_kind(attention);
            cfg.layer_norm = layer_norm;
            auto model = condtok::init_model(cfg, seed);
            std::vector<Matrix> xs, ys;
            for (std::uint64_t i = 0; i < 2; ++i) {
                condtok::Rng rng = condtok::Rng::stream(seed, "gradcheck-data", i);
                xs.push_back(Matrix::random_uniform(cfg.seq_len, cfg.token_dim, -1, 1, rng));
                ys.push_back(Matrix::random_uniform(cfg.seq_len, cfg.embed_dim, -1, 1, rng));
            }
            if (correction != "none")
                model.correction = condtok::make_correction(correction_from_flags(correction, lambda),
                                                            condtok::embed(model, xs.front()));
            condtok::GradientCheckOptions opts;
            opts.seed = seed;
            const auto report = condtok::gradient_check(model, xs, ys, opts);
            Json j = condtok::to_json(report);
            j["pass"] = report.max_rel_error < 1e-5;
            emit(render(j, format), "");
            if (!j["pass"].get<bool>()) throw ReportedFailure("gradient check failed");
        } else if (*train) {
            auto cfg = load_train_config(config_path);
            apply_seed(cfg, seed);
            if (epochs) cfg.epochs = *epochs;
            const auto result = condtok::train(cfg);
            if (format == "csv") {
                emit(condtok::logs_to_csv(result.logs), out);
            } else {
                Json arr = Json::array();
                for (const auto& l : result.logs) {
                    arr.push_back({{"epoch", l.epoch},
                                   {"loss", condtok::detail::num(l.train_loss)},
                                   {"kappa_tokens", condtok::detail::num(l.kappa_tokens)},
                                   {"kappa_attn_l1", condtok::detail::num(l.kappa_attn_layer1_mean)},
                                   {"kappa_attn_all", condtok::detail::num(l.kappa_attn_alllayers_mean)}});
                }
                emit(json_text({{"diverged", result.diverged}, {"epochs", arr}}), out);
            }
            if (result.diverged) throw ReportedFailure("training diverged at " + result.diagnostic);
        } else if (*compare) {
            auto cond = load_train_config(config_path);
            apply_seed(cond, seed);
            if (epochs) cond.epochs = *epochs;
            if (!cond.model.correction) cond.model.correction = correction_from_flags(kind, lambda);
            auto base = cond;
            base.model.correction.reset();
            const auto c = condtok::compare_runs(base, cond);
            std::filesystem::create_directories(out_dir);
            const std::filesystem::path dir(out_dir);
            emit(condtok::logs_to_csv(c.baseline.logs), (dir / "baseline.csv").string());
            emit(condtok::logs_to_csv(c.conditioned.logs), (dir / "conditioned.csv").string());
            const std::string summary = json_text(condtok::to_json(c.summary));
            emit(summary, (dir / "summary.json").string());
            emit(summary, "");
            if (c.baseline.diverged || c.conditioned.diverged) throw ReportedFailure("a training run diverged");
        }
    } catch (const ReportedFailure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kNumericalError;
    } catch (const condtok::NumericalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kNumericalError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsageError;
    }
    return 0;
}
