#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pabn/data.hpp"
#include "pabn/gradcheck.hpp"
#include "pabn/model.hpp"
#include "pabn/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Values absent from the command line are filled from the JSON config
// file, so explicit flags always win.
struct ConfigBinder {
    std::vector<std::function<void(const json&)>> appliers;

    template <typename T>
    void bind(CLI::Option* opt, T& var, const std::string& key) {
        appliers.push_back([opt, &var, key](const json& j) {
            if (opt->count() == 0 && j.contains(key)) {
                var = j.at(key).get<T>();
            }
        });
    }

    void apply_file(const std::string& path) {
        if (path.empty()) {
            return;
        }
        std::ifstream in(path);
        if (!in) {
            throw std::invalid_argument("config file " + path + " is unreadable");
        }
        json j;
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            throw std::invalid_argument("config file " + path + ": " + e.what());
        }
        for (auto& f : appliers) {
            f(j);
        }
    }
};

std::string resolve_out(const std::string& flag_value, bool required) {
    if (!flag_value.empty()) {
        return flag_value;
    }
    const char* env = std::getenv("PABN_OUT");
    if (env != nullptr && *env != '\0') {
        return env;
    }
    if (required) {
        throw std::invalid_argument("no output directory: pass --out or set PABN_OUT");
    }
    return "";
}

// The resolved config lands on disk before any real work, so every run
// directory records exactly what produced it.
void echo_resolved_config(const std::string& out, const json& resolved) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec || !fs::is_directory(out)) {
        throw pabn::DataError(out + ": cannot create output directory");
    }
    std::ofstream f(fs::path(out) / "resolved_config.json");
    f << resolved.dump(2) << "\n";
    if (!f) {
        throw pabn::DataError(out + ": cannot write resolved_config.json");
    }
}

int cmd_gradcheck(const std::string& scope, std::uint64_t seed) {
    const char* fault = std::getenv("PABN_FAULT_OP");
    if (fault != nullptr && *fault != '\0') {
        pabn::fault_injection() = pabn::FaultInjection{fault, 2.0};
    }

    std::printf("%-16s %-12s %s\n", "op", "max_rel_err", "status");
    bool all_ok = true;
    if (scope == "primitives") {
        const auto& checks = pabn::primitive_gradchecks();
        if (checks.size() != pabn::ops::kDifferentiableOps.size()) {
            std::fprintf(stderr, "gradcheck registry covers %zu ops, expected %zu\n",
                         checks.size(), pabn::ops::kDifferentiableOps.size());
            return 3;
        }
        for (const auto& c : checks) {
            const double err = pabn::primitive_gradcheck_worst(c, seed);
            const bool ok = err < 1e-4;
            all_ok = all_ok && ok;
            std::printf("%-16s %-12.3e %s\n", c.op.c_str(), err, ok ? "PASS" : "FAIL");
        }
    } else {
        const double err = pabn::model_gradcheck(seed);
        all_ok = err < 1e-3;
        std::printf("%-16s %-12.3e %s\n", "model", err, all_ok ? "PASS" : "FAIL");
    }
    return all_ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Pairwise-aligned bilinear network for few-shot recognition"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate the synthetic fine-grained dataset");
    int sy_classes = 30, sy_per_class = 40;
    std::uint64_t sy_seed = 7;
    std::string sy_out, sy_config;
    ConfigBinder sy_bind;
    sy_bind.bind(synth->add_option("--classes", sy_classes, "Number of classes"), sy_classes,
                 "classes");
    sy_bind.bind(synth->add_option("--per-class", sy_per_class, "Images per class"), sy_per_class,
                 "per-class");
    sy_bind.bind(synth->add_option("--seed", sy_seed, "Generator seed"), sy_seed, "seed");
    sy_bind.bind(synth->add_option("--out", sy_out, "Output directory"), sy_out, "out");
    synth->add_option("--config", sy_config, "JSON config file (flags win)");

    // train
    auto* train_cmd = app.add_subcommand("train", "Meta-train on an episodic dataset");
    std::string tr_data, tr_align = "none", tr_out, tr_config;
    int tr_ways = 5, tr_shots = 1, tr_queries = 15, tr_episodes = 1000, tr_log_interval = 50;
    double tr_lambda = 1.0, tr_lr = 0.001;
    std::uint64_t tr_seed = 0;
    ConfigBinder tr_bind;
    tr_bind.bind(train_cmd->add_option("--data", tr_data, "Dataset root"), tr_data, "data");
    tr_bind.bind(train_cmd->add_option("--ways", tr_ways, "Classes per episode"), tr_ways, "ways");
    tr_bind.bind(train_cmd->add_option("--shots", tr_shots, "Support images per class"), tr_shots,
                 "shots");
    tr_bind.bind(train_cmd->add_option("--queries", tr_queries, "Query images per class"),
                 tr_queries, "queries");
    tr_bind.bind(train_cmd->add_option("--align", tr_align, "Alignment mode")
                     ->check(CLI::IsMember({"none", "loss1", "loss2"})),
                 tr_align, "align");
    tr_bind.bind(train_cmd->add_option("--lambda", tr_lambda, "Alignment weight"), tr_lambda,
                 "lambda");
    tr_bind.bind(train_cmd->add_option("--episodes", tr_episodes, "Training episodes"),
                 tr_episodes, "episodes");
    tr_bind.bind(train_cmd->add_option("--lr", tr_lr, "Adam learning rate"), tr_lr, "lr");
    tr_bind.bind(train_cmd->add_option("--seed", tr_seed, "Run seed"), tr_seed, "seed");
    tr_bind.bind(train_cmd->add_option("--log-interval", tr_log_interval, "Episodes between log rows"),
                 tr_log_interval, "log-interval");
    tr_bind.bind(train_cmd->add_option("--out", tr_out, "Run directory"), tr_out, "out");
    train_cmd->add_option("--config", tr_config, "JSON config file (flags win)");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
    std::string ev_ckpt, ev_data, ev_out, ev_config;
    int ev_ways = 5, ev_shots = 1, ev_queries = 15, ev_episodes = 600;
    std::uint64_t ev_seed = 0;
    ConfigBinder ev_bind;
    ev_bind.bind(eval_cmd->add_option("--ckpt", ev_ckpt, "Checkpoint file"), ev_ckpt, "ckpt");
    ev_bind.bind(eval_cmd->add_option("--data", ev_data, "Dataset root"), ev_data, "data");
    ev_bind.bind(eval_cmd->add_option("--ways", ev_ways, "Classes per episode"), ev_ways, "ways");
    ev_bind.bind(eval_cmd->add_option("--shots", ev_shots, "Support images per class"), ev_shots,
                 "shots");
    ev_bind.bind(eval_cmd->add_option("--queries", ev_queries, "Query images per class"),
                 ev_queries, "queries");
    ev_bind.bind(eval_cmd->add_option("--episodes", ev_episodes, "Evaluation episodes"),
                 ev_episodes, "episodes");
    ev_bind.bind(eval_cmd->add_option("--seed", ev_seed, "Episode stream seed"), ev_seed, "seed");
    ev_bind.bind(eval_cmd->add_option("--out", ev_out, "Run directory"), ev_out, "out");
    eval_cmd->add_option("--config", ev_config, "JSON config file (flags win)");

    // gradcheck
    auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient audit");
    std::string gc_scope = "primitives", gc_out, gc_config;
    std::uint64_t gc_seed = 1;
    ConfigBinder gc_bind;
    gc_bind.bind(gc_cmd->add_option("--scope", gc_scope, "primitives or model")
                     ->check(CLI::IsMember({"primitives", "model"})),
                 gc_scope, "scope");
    gc_bind.bind(gc_cmd->add_option("--seed", gc_seed, "Base seed"), gc_seed, "seed");
    gc_bind.bind(gc_cmd->add_option("--out", gc_out, "Run directory (optional)"), gc_out, "out");
    gc_cmd->add_option("--config", gc_config, "JSON config file (flags win)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (synth->parsed()) {
            sy_bind.apply_file(sy_config);
            const std::string out = resolve_out(sy_out, true);
            const json resolved{{"subcommand", "synth"},
                                {"classes", sy_classes},
                                {"per-class", sy_per_class},
                                {"seed", sy_seed},
                                {"out", out}};
            echo_resolved_config(out, resolved);
            pabn::SynthSpec spec;
            spec.n_classes = sy_classes;
            spec.n_images_per_class = sy_per_class;
            spec.seed = sy_seed;
            pabn::generate_synthetic(spec, out);
            std::printf("wrote %d classes x %d images to %s\n", sy_classes, sy_per_class,
                        out.c_str());
            return 0;
        }

        if (train_cmd->parsed()) {
            tr_bind.apply_file(tr_config);
            if (tr_data.empty()) {
                throw std::invalid_argument("train: --data is required");
            }
            const std::string out = resolve_out(tr_out, true);
            const json resolved{{"subcommand", "train"}, {"data", tr_data},
                                {"ways", tr_ways},       {"shots", tr_shots},
                                {"queries", tr_queries}, {"align", tr_align},
                                {"lambda", tr_lambda},   {"episodes", tr_episodes},
                                {"lr", tr_lr},           {"seed", tr_seed},
                                {"log-interval", tr_log_interval}, {"out", out}};
            echo_resolved_config(out, resolved);

            pabn::TrainConfig cfg;
            cfg.spec = pabn::EpisodeSpec{tr_ways, tr_shots, tr_queries};
            const auto kind = pabn::align_kind_from_string(tr_align);
            cfg.align = pabn::AlignMode::make(
                kind, kind == pabn::AlignMode::Kind::none ? 0.0 : tr_lambda);
            cfg.n_training_episodes = tr_episodes;
            cfg.alpha = tr_lr;
            cfg.seed = tr_seed;
            cfg.log_interval = tr_log_interval;
            cfg.checkpoint_path = (fs::path(out) / "checkpoint.bin").string();

            auto index = pabn::load_dataset(tr_data);
            std::ofstream log_csv(fs::path(out) / "train_log.csv");
            if (!log_csv) {
                throw pabn::DataError(out + ": cannot write train_log.csv");
            }
            auto result = pabn::train(cfg, index, &log_csv);
            std::printf("trained %d episodes, final loss %.6f, checkpoint %s\n", tr_episodes,
                        result.log.empty() ? 0.0 : result.log.back().loss,
                        cfg.checkpoint_path.c_str());
            return 0;
        }

        if (eval_cmd->parsed()) {
            ev_bind.apply_file(ev_config);
            if (ev_ckpt.empty()) {
                throw std::invalid_argument("eval: --ckpt is required");
            }
            if (ev_data.empty()) {
                throw std::invalid_argument("eval: --data is required");
            }
            const std::string out = resolve_out(ev_out, true);
            const json resolved{{"subcommand", "eval"},     {"ckpt", ev_ckpt},
                                {"data", ev_data},          {"ways", ev_ways},
                                {"shots", ev_shots},        {"queries", ev_queries},
                                {"episodes", ev_episodes},  {"seed", ev_seed},
                                {"out", out}};
            echo_resolved_config(out, resolved);

            auto ckpt = pabn::load_checkpoint(ev_ckpt);
            auto index = pabn::load_dataset(ev_data);
            const pabn::EpisodeSpec spec{ev_ways, ev_shots, ev_queries};
            auto report = pabn::evaluate(ckpt.params, index, spec, ev_episodes, ev_seed);

            const json report_json{{"mean", report.mean},
                                   {"half_width_95", report.half_width_95},
                                   {"n_episodes", report.n_episodes},
                                   {"spec",
                                    {{"ways", spec.ways},
                                     {"shots", spec.shots},
                                     {"queries", spec.queries}}},
                                   {"seed", report.seed}};
            std::ofstream jf(fs::path(out) / "eval_report.json");
            jf << report_json.dump(2) << "\n";
            if (!jf) {
                throw pabn::DataError(out + ": cannot write eval_report.json");
            }

            const fs::path csv_path = fs::path(out) / "eval_summary.csv";
            const bool fresh = !fs::exists(csv_path);
            std::ofstream cf(csv_path, std::ios::app);
            if (fresh) {
                cf << "ways,shots,queries,n_episodes,seed,accuracy\n";
            }
            cf << spec.ways << "," << spec.shots << "," << spec.queries << ","
               << report.n_episodes << "," << report.seed << ","
               << pabn::format_percent_ci(report.mean, report.half_width_95) << "\n";
            if (!cf) {
                throw pabn::DataError(out + ": cannot write eval_summary.csv");
            }
            std::printf("%d-way %d-shot: %s over %d episodes\n", spec.ways, spec.shots,
                        pabn::format_percent_ci(report.mean, report.half_width_95).c_str(),
                        report.n_episodes);
            return 0;
        }

        // gradcheck
        gc_bind.apply_file(gc_config);
        if (gc_scope != "primitives" && gc_scope != "model") {
            throw std::invalid_argument("gradcheck: --scope must be primitives or model");
        }
        const std::string out = resolve_out(gc_out, false);
        if (!out.empty()) {
            echo_resolved_config(out, json{{"subcommand", "gradcheck"},
                                           {"scope", gc_scope},
                                           {"seed", gc_seed},
                                           {"out", out}});
        }
        return cmd_gradcheck(gc_scope, gc_seed);
    } catch (const pabn::NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 3;
    } catch (const pabn::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
