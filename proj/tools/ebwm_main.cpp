// Command-line front end: train / eval / refine-demo / ablate / report.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ebwm/ebwm.hpp"

namespace {

using ebwm::Json;

// dot-path overrides: "mcmc.steps=2" -> {"mcmc":{"steps":2}}
Json overrides_to_json(const std::vector<std::string>& sets) {
    Json patch = Json::object();
    for (const std::string& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ebwm::ConfigError("--set expects key=value, got '" + kv + "'");
        }
        const std::string key = kv.substr(0, eq);
        const std::string raw = kv.substr(eq + 1);
        Json value;
        try {
            value = Json::parse(raw);
        } catch (const Json::parse_error&) {
            value = raw;  // unquoted strings
        }
        Json* node = &patch;
        size_t start = 0;
        while (true) {
            const auto dot = key.find('.', start);
            const std::string part = key.substr(start, dot - start);
            if (part.empty()) throw ebwm::ConfigError("--set: empty key segment in '" + key + "'");
            if (dot == std::string::npos) {
                (*node)[part] = value;
                break;
            }
            node = &(*node)[part];
            start = dot + 1;
        }
    }
    return patch;
}

ebwm::TrainConfig load_config(const std::string& path, const std::vector<std::string>& sets) {
    std::ifstream is(path);
    if (!is) throw ebwm::ConfigError("cannot open config file '" + path + "'");
    Json j;
    try {
        j = Json::parse(is);
    } catch (const Json::parse_error& e) {
        throw ebwm::ConfigError(std::string("config parse error: ") + e.what());
    }
    const Json patch = overrides_to_json(sets);
    j.merge_patch(patch);
    return ebwm::config_from_json(j);
}

int fail(const std::string& code, const std::string& message) {
    Json e;
    e["error"] = code;
    e["message"] = message;
    std::cerr << e.dump() << "\n";
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"energy-based world model training and evaluation harness"};
    app.require_subcommand(1);

    std::string config_path, checkpoint_path, metrics_path, out_path, out_dir;
    std::vector<std::string> sets;
    uint64_t batch_seed = 1;
    bool verbose = false;

    auto* train = app.add_subcommand("train", "train a model from a JSON config");
    train->add_option("--config", config_path, "config file")->required();
    train->add_option("--set", sets, "override config keys (dot.path=value)");
    train->add_flag("--verbose", verbose, "log validation losses to stderr");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the config's dataset");
    eval->add_option("--config", config_path, "config file")->required();
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    eval->add_option("--set", sets, "override config keys (dot.path=value)");

    auto* demo = app.add_subcommand("refine-demo",
                                    "run the refinement chain on one batch and export the trace");
    demo->add_option("--config", config_path, "config file")->required();
    demo->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    demo->add_option("--out", out_path, "trace output (newline-delimited records)")->required();
    demo->add_option("--batch-seed", batch_seed, "which validation batch to refine");
    demo->add_option("--set", sets, "override config keys (dot.path=value)");

    auto* ablate = app.add_subcommand("ablate", "run the design-choice ablation suite");
    ablate->add_option("--config", config_path, "base config file")->required();
    ablate->add_option("--out", out_path, "stability report CSV")->required();
    ablate->add_option("--set", sets, "override config keys (dot.path=value)");

    auto* report = app.add_subcommand("report", "plots and summary from a metrics CSV");
    report->add_option("--metrics", metrics_path, "metrics CSV")->required();
    report->add_option("--out-dir", out_dir, "directory for plot files")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) {
            ebwm::TrainConfig cfg = load_config(config_path, sets);
            ebwm::Trainer<float> trainer(cfg);
            ebwm::RunStats stats = trainer.run(verbose);
            const std::string dir = ebwm::resolve_out_dir(cfg);
            std::printf("trained %lld steps; final train loss %.6g; best val loss %.6g%s\n",
                        static_cast<long long>(stats.steps_run), stats.final_loss,
                        stats.best_val_loss, stats.stopped_early ? " (target reached)" : "");
            std::printf("metrics: %s/%s\ncheckpoint: %s/%s\n", dir.c_str(),
                        cfg.metrics_file.c_str(), dir.c_str(), cfg.checkpoint_file.c_str());
            if (stats.divergent) return fail("diverged", "training loss became non-finite");
            return 0;
        }
        if (eval->parsed()) {
            ebwm::TrainConfig cfg = load_config(config_path, sets);
            ebwm::Trainer<float> trainer(cfg, /*write_metrics=*/false);
            trainer.load_checkpoint(checkpoint_path);
            ebwm::MetricsRow row = trainer.evaluate(0);
            std::printf("val loss %.6g", row.loss);
            if (row.perplexity_or_mse.has_value()) {
                std::printf("; %s %.6g",
                            cfg.model.mode == ebwm::Mode::discrete ? "perplexity" : "mse",
                            *row.perplexity_or_mse);
            }
            if (row.copy_baseline.has_value()) {
                std::printf("; copy baseline %.6g", *row.copy_baseline);
            }
            std::printf("\n");
            return 0;
        }
        if (demo->parsed()) {
            ebwm::TrainConfig cfg = load_config(config_path, sets);
            if (cfg.family != ebwm::Family::ebwm) {
                return fail("config", "refine-demo needs an ebwm-family config");
            }
            ebwm::Trainer<float> trainer(cfg, /*write_metrics=*/false);
            trainer.load_checkpoint(checkpoint_path);
            auto batch = trainer.data().val_batch(static_cast<int64_t>(batch_seed),
                                                  cfg.micro_batch());
            auto cand0 = ebwm::init_candidate(cfg.mcmc.init_strategy, batch, trainer.weights(),
                                              cfg.mcmc.init_noise_scale, batch_seed);
            auto rr = ebwm::refine(batch, cand0, trainer.weights(), false, batch_seed);
            std::ofstream os(out_path, std::ios::trunc);
            if (!os) return fail("io", "cannot open '" + out_path + "'");
            ebwm::export_trace(rr.trace, os);
            std::printf("wrote %zu refinement records to %s\n", rr.trace.steps.size(),
                        out_path.c_str());
            return 0;
        }
        if (ablate->parsed()) {
            ebwm::TrainConfig cfg = load_config(config_path, sets);
            ebwm::AblationReport rep = ebwm::run_ablation_suite<float>(cfg, out_path);
            std::printf("%-32s %-16s %-7s %-10s\n", "design choice", "status", "stable",
                        "convergent");
            for (const auto& r : rep.rows) {
                std::printf("%-32s %-16s %-7s %-10s\n", r.name.c_str(),
                            r.status.substr(0, 15).c_str(),
                            r.status == "completed" ? (r.stable ? "yes" : "no") : "-",
                            r.status == "completed" ? (r.convergent ? "yes" : "no") : "-");
            }
            std::printf("report: %s\n", out_path.c_str());
            return 0;
        }
        if (report->parsed()) {
            std::filesystem::create_directories(out_dir);
            const std::string summary = ebwm::write_report(metrics_path, out_dir);
            std::printf("%s\nplots: %s/loss_vs_steps.svg %s/loss_vs_flops.svg\n",
                        summary.c_str(), out_dir.c_str(), out_dir.c_str());
            return 0;
        }
    } catch (const ebwm::ConfigError& e) {
        return fail("config", e.what());
    } catch (const ebwm::ValueError& e) {
        return fail("value", e.what());
    } catch (const ebwm::ShapeError& e) {
        return fail("shape", e.what());
    } catch (const std::exception& e) {
        return fail("runtime", e.what());
    }
    return fail("usage", "no subcommand");
}
