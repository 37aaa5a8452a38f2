#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ebwm/ebwm.hpp"

using namespace ebwm;
namespace fs = std::filesystem;

namespace {

TrainConfig smoke_cfg(Family family, Mode mode) {
    TrainConfig c = preset_config("smoke");
    c.family = family;
    if (mode == Mode::discrete) {
        c.model.mode = Mode::discrete;
        c.model.vocab_size = 256;
        c.model.feature_dim = 0;
        c.model.context_length = 8;
        c.data.kind = DataKind::bytes;
        c.data.synthetic_bytes = 1 << 14;
    }
    c.max_steps = 8;
    c.warmup_steps = 4;
    c.eval_interval = 4;
    c.eval_batches = 1;
    return c;
}

std::string temp_dir(const std::string& tag) {
    auto dir = fs::temp_directory_path() / ("ebwm_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)),
                       std::istreambuf_iterator<char>());
}

}  // namespace

TEST(ScaledLr, PaperExamples) {
    EXPECT_DOUBLE_EQ(scaled_lr(2e-4, 192), 1.5e-4);
    EXPECT_DOUBLE_EQ(scaled_lr(1.0, 256), 1.0);  // identity point of the rule
    EXPECT_DOUBLE_EQ(scaled_lr(6e-4, 384), 9e-4);
    EXPECT_THROW(scaled_lr(0.0, 1), ConfigError);
}

TEST(LrSchedule, EndpointsExact) {
    const double peak = 0.02;
    EXPECT_DOUBLE_EQ(lr_at_step(0, peak, 100, 20.0, 10.0, 1000), peak / 20.0);
    EXPECT_DOUBLE_EQ(lr_at_step(100, peak, 100, 20.0, 10.0, 1000), peak);
    EXPECT_DOUBLE_EQ(lr_at_step(1000, peak, 100, 20.0, 10.0, 1000), peak / 10.0);
    EXPECT_THROW(lr_at_step(1001, peak, 100, 20.0, 10.0, 1000), ConfigError);
    EXPECT_THROW(lr_at_step(-1, peak, 100, 20.0, 10.0, 1000), ConfigError);
}

TEST(LrSchedule, StepDifferencesBounded) {
    const double peak = 0.02;
    const int64_t warmup = 50, total = 500;
    const double warmup_bound = peak / warmup;
    constexpr double pi = 3.14159265358979323846;
    const double cosine_bound =
        (peak - peak / 10.0) * 0.5 * pi / static_cast<double>(total - warmup);
    for (int64_t s = 0; s < total; ++s) {
        const double d = std::abs(lr_at_step(s + 1, peak, warmup, 20.0, 10.0, total) -
                                  lr_at_step(s, peak, warmup, 20.0, 10.0, total));
        const double bound = s < warmup ? warmup_bound : cosine_bound;
        EXPECT_LE(d, bound * (1 + 1e-12)) << "step " << s;
    }
}

TEST(AdamW, ZeroGradsDecayOnly) {
    ParamStore<double> store;
    store.add("w", Tensor<double>::full({3}, 2.0));
    AdamW<double> opt;
    OptSettings s;
    s.weight_decay = 0.1;
    std::vector<Tensor<double>> grads = {Tensor<double>::zeros({3})};
    opt.step(store, grads, 0.5, s);
    for (int i = 0; i < 3; ++i) {
        EXPECT_DOUBLE_EQ(store[0].data()[i], 2.0 * (1.0 - 0.5 * 0.1));
    }
}

TEST(AdamW, FirstStepOfConstantGradIsMinusLr) {
    ParamStore<double> store;
    store.add("w", Tensor<double>::zeros({1}));
    AdamW<double> opt;
    OptSettings s;
    s.weight_decay = 0.0;
    s.grad_clip = 10.0;  // stay under the clip
    std::vector<Tensor<double>> grads = {Tensor<double>::full({1}, 1.0)};
    opt.step(store, grads, 0.01, s);
    // bias-corrected moments cancel: delta = -lr / (1 + eps)
    EXPECT_NEAR(store[0].data()[0], -0.01, 0.01 * 1e-7);
}

TEST(AdamW, GlobalNormClipRescales) {
    ParamStore<double> store;
    store.add("w", Tensor<double>::zeros({4}));
    AdamW<double> opt;
    OptSettings s;
    s.grad_clip = 1.0;
    s.weight_decay = 0.0;
    // gradient of norm 10 -> rescaled by 0.1 before the moments
    std::vector<Tensor<double>> grads = {Tensor<double>::full({4}, 5.0)};
    auto st = opt.step(store, grads, 0.1, s);
    EXPECT_DOUBLE_EQ(st.grad_norm, 10.0);
    EXPECT_DOUBLE_EQ(st.clip_scale, 0.1);
    // all coordinates move identically; direction preserved
    for (int i = 0; i < 4; ++i) EXPECT_LT(store[0].data()[i], 0.0);
}

TEST(AdamW, AlphaGroupUsesMultiplierAndNoDecay) {
    ParamStore<double> store;
    store.add("w", Tensor<double>::full({1}, 1.0));
    store.add("alpha", Tensor<double>::full({1}, 1.0),
              ParamFlags{.no_decay = true, .alpha_group = true});
    AdamW<double> opt;
    OptSettings s;
    s.weight_decay = 0.5;
    s.grad_clip = 100.0;
    s.alpha_lr_multiplier = 10.0;
    std::vector<Tensor<double>> grads = {Tensor<double>::full({1}, 1.0),
                                         Tensor<double>::full({1}, 1.0)};
    auto st = opt.step(store, grads, 0.01, s);
    EXPECT_DOUBLE_EQ(st.alpha_lr, 0.1);
    // alpha moved ~10x further and saw no decay
    const double w_move = 1.0 - store[0].data()[0];
    const double a_move = 1.0 - store[1].data()[0];
    EXPECT_GT(a_move, 5.0 * w_move);
}

TEST(AdamW, NonFiniteGradientAbortsStep) {
    ParamStore<double> store;
    store.add("w", Tensor<double>::full({2}, 3.0));
    AdamW<double> opt;
    std::vector<Tensor<double>> grads = {
        Tensor<double>::from({2}, {1.0, std::numeric_limits<double>::quiet_NaN()})};
    auto st = opt.step(store, grads, 0.1, {});
    EXPECT_TRUE(st.aborted);
    EXPECT_DOUBLE_EQ(store[0].data()[0], 3.0);
    EXPECT_DOUBLE_EQ(store[0].data()[1], 3.0);
}

TEST(AdamW, FrozenAlphaExcludedFromUpdateAndNorm) {
    ParamStore<double> store;
    store.add("alpha", Tensor<double>::full({1}, 7.0),
              ParamFlags{.no_decay = true, .alpha_group = true});
    AdamW<double> opt;
    OptSettings s;
    s.alpha_learnable = false;
    std::vector<Tensor<double>> grads = {Tensor<double>::full({1}, 100.0)};
    auto st = opt.step(store, grads, 0.1, s);
    EXPECT_DOUBLE_EQ(store[0].data()[0], 7.0);
    EXPECT_DOUBLE_EQ(st.grad_norm, 0.0);
}

TEST(Flops, ConventionArithmetic) {
    ModelConfig cfg;
    cfg.mode = Mode::continuous;
    cfg.embed_dim = 64;
    cfg.heads = 4;
    cfg.blocks = 2;
    cfg.context_length = 16;
    cfg.feature_dim = 16;
    MCMCConfig mc;
    mc.steps = 4;
    const double d = 64, h = static_cast<double>(cfg.ff_hidden());
    const double P = 2 * (4 * d * d + 3 * d * h + 2 * d);
    const double T = 16;
    EXPECT_DOUBLE_EQ(flops_estimate(Family::baseline, cfg, mc, Phase::inference), 2 * P * T);
    EXPECT_DOUBLE_EQ(flops_estimate(Family::baseline, cfg, mc, Phase::train), 6 * P * T);
    // ebwm inference with K=4: 4 * (2PT + 4PT) = 24PT
    EXPECT_DOUBLE_EQ(flops_estimate(Family::ebwm, cfg, mc, Phase::inference), 24 * P * T);
    EXPECT_DOUBLE_EQ(flops_estimate(Family::ebwm, cfg, mc, Phase::train), 72 * P * T);
    // doubling the block count doubles the estimate (embeddings excluded)
    ModelConfig doubled = cfg;
    doubled.blocks = 4;
    EXPECT_DOUBLE_EQ(flops_estimate(Family::ebwm, doubled, mc, Phase::train),
                     2 * flops_estimate(Family::ebwm, cfg, mc, Phase::train));
}

TEST(Trainer, AlphaZeroMakesLossReconstructionOfInit) {
    // frozen step size 0: refine is the identity, the loss is the (scaled)
    // reconstruction of the raw init
    TrainConfig cfg = smoke_cfg(Family::ebwm, Mode::continuous);
    cfg.mcmc.alpha_learnable = false;
    cfg.mcmc.alpha_init = 0.0;
    auto w = init_weights<double>(cfg.family, cfg.model, cfg.mcmc, cfg.seed);
    DataSource<double> data(cfg);
    auto batch = data.train_batch(1, 0, cfg.micro_batch());
    Tensor<double> c0 = init_candidate(cfg.mcmc.init_strategy, batch, w, 1.0, 9);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    w.store.watch_all(tape);
    auto rr = refine(batch, c0, w, true, 9);
    EXPECT_EQ(max_abs_diff(rr.candidate, c0), 0.0);
    auto lb = total_loss(batch, rr, w, cfg.loss);
    const double direct =
        static_cast<double>(smooth_l1(c0, batch.target_features(), 1.0).item());
    EXPECT_NEAR(lb.total.item(), 60.0 * direct, 1e-9);
}

TEST(Trainer, OverfitsOneRepeatedBatchBothFamilies) {
    for (Family family : {Family::baseline, Family::ebwm}) {
        TrainConfig cfg = smoke_cfg(family, Mode::continuous);
        cfg.mcmc.alpha_init = 1.0;
        auto w = init_weights<double>(cfg.family, cfg.model, cfg.mcmc, cfg.seed);
        DataSource<double> data(cfg);
        auto batch = data.train_batch(1, 0, 4);  // one fixed batch, reused
        AdamW<double> opt;
        OptSettings os;
        os.weight_decay = 0.0;
        os.grad_clip = cfg.grad_clip;
        os.alpha_lr_multiplier = cfg.mcmc.alpha_lr_multiplier;
        double first = 0.0, last = 0.0;
        for (int rep = 0; rep < 50; ++rep) {
            Tape<double> tape;
            TapeScope<double> scope(tape);
            w.store.watch_all(tape);
            Tensor<double> loss;
            if (family == Family::baseline) {
                loss = smooth_l1(ar_forward(batch, w), batch.target_features(), 1.0);
            } else {
                Tensor<double> c0 =
                    init_candidate(InitStrategy::random_noise, batch, w, 1.0, 5);
                auto rr = refine(batch, c0, w, true, 5);
                loss = total_loss(batch, rr, w, cfg.loss).total;
            }
            if (rep == 0) first = loss.item();
            last = loss.item();
            auto gs = tape.grad(loss, w.store.all_values(), false);
            opt.step(w.store, gs, 3e-3, os);
        }
        EXPECT_LT(last, first) << "family " << to_string(family);
    }
}

TEST(Trainer, MetricsRowAccountingAndFlopsIncrement) {
    TrainConfig cfg = smoke_cfg(Family::ebwm, Mode::continuous);
    cfg.out_dir = temp_dir("metrics_row");
    Trainer<double> trainer(cfg);
    const double per_step =
        flops_estimate(cfg.family, cfg.model, cfg.mcmc, Phase::train) *
        static_cast<double>(cfg.effective_batch_size);
    MetricsRow r1 = trainer.train_step(1);
    MetricsRow r2 = trainer.train_step(2);
    EXPECT_DOUBLE_EQ(r1.cumulative_flops, per_step);
    EXPECT_DOUBLE_EQ(r2.cumulative_flops, 2 * per_step);
    EXPECT_TRUE(r1.alpha_value.has_value());
    EXPECT_TRUE(r1.grad_norm.has_value());
    EXPECT_TRUE(r1.copy_baseline.has_value());
    fs::remove_all(cfg.out_dir);
}

TEST(Trainer, UntrainedDiscreteModelEvaluatesAtUniformPerplexity) {
    for (Family family : {Family::baseline, Family::ebwm}) {
        TrainConfig cfg = smoke_cfg(family, Mode::discrete);
        Trainer<double> trainer(cfg, /*write_metrics=*/false);
        MetricsRow row = trainer.evaluate(0);
        ASSERT_TRUE(row.perplexity_or_mse.has_value());
        EXPECT_NEAR(*row.perplexity_or_mse, 256.0, 2.0) << to_string(family);
    }
}

TEST(Trainer, SeededRunsProduceByteIdenticalMetrics) {
    TrainConfig cfg = smoke_cfg(Family::ebwm, Mode::continuous);
    cfg.max_steps = 6;
    cfg.wall_time_in_metrics = false;
    cfg.out_dir = temp_dir("determinism_a");
    {
        Trainer<float> t(cfg);
        t.run();
    }
    std::string first = read_file(cfg.out_dir + "/" + cfg.metrics_file);
    cfg.out_dir = temp_dir("determinism_b");
    {
        Trainer<float> t(cfg);
        t.run();
    }
    std::string second = read_file(cfg.out_dir + "/" + cfg.metrics_file);
    ASSERT_FALSE(first.empty());
    EXPECT_EQ(first, second);
    fs::remove_all(temp_dir("determinism_a"));
    fs::remove_all(temp_dir("determinism_b"));
}

TEST(Trainer, EnvVarOverridesOutputDir) {
    TrainConfig cfg = smoke_cfg(Family::ebwm, Mode::continuous);
    cfg.out_dir = "should/not/be/used";
    const std::string dir = temp_dir("env_override");
    setenv("EBWM_OUT_DIR", dir.c_str(), 1);
    {
        Trainer<float> t(cfg);
        t.train_step(1);
    }
    unsetenv("EBWM_OUT_DIR");
    EXPECT_TRUE(fs::exists(dir + "/" + cfg.metrics_file));
    fs::remove_all(dir);
}

TEST(Ablation, DeltasTouchExactlyOneKnob) {
    TrainConfig base = smoke_cfg(Family::ebwm, Mode::continuous);
    Json base_json = config_to_json(base);

    auto diff_keys = [&](const TrainConfig& delta) {
        Json d = config_to_json(delta);
        std::vector<std::string> changed;
        for (auto& [section, values] : d.items()) {
            if (values.is_object()) {
                for (auto& [key, value] : values.items()) {
                    if (base_json[section].contains(key) &&
                        base_json[section][key] != value) {
                        changed.push_back(section + "." + key);
                    }
                }
            } else if (base_json[section] != values) {
                changed.push_back(section);
            }
        }
        return changed;
    };

    auto non_learnable = diff_keys(ablation_delta(base, "Non-Learnable Alpha"));
    ASSERT_EQ(non_learnable.size(), 1u);
    EXPECT_EQ(non_learnable[0], "mcmc.alpha_learnable");

    auto unclamped = diff_keys(ablation_delta(base, "Unclamped MCMC Gradient"));
    ASSERT_EQ(unclamped.size(), 1u);
    EXPECT_EQ(unclamped[0], "mcmc.clamp_enabled");

    auto lower = diff_keys(ablation_delta(base, "Lower Initial MCMC Step Size"));
    ASSERT_EQ(lower.size(), 1u);
    EXPECT_EQ(lower[0], "mcmc.alpha_init");

    auto defaults = diff_keys(ablation_delta(base, "All Specified Design Choices"));
    EXPECT_TRUE(defaults.empty());
}

TEST(Ablation, SuiteRunsAllRowsAtSmokeScale) {
    TrainConfig base = smoke_cfg(Family::ebwm, Mode::continuous);
    base.max_steps = 4;
    base.eval_interval = 4;
    base.out_dir = temp_dir("ablation");
    const std::string report_path = base.out_dir + "/ablation.csv";
    AblationReport rep = run_ablation_suite<double>(base, report_path);
    ASSERT_EQ(rep.rows.size(), ablation_row_names().size());
    int completed = 0, not_applicable = 0;
    for (const auto& row : rep.rows) {
        if (row.status == "completed") ++completed;
        if (row.status == "not-applicable") ++not_applicable;
    }
    EXPECT_EQ(completed, 8);       // 7 deltas + the all-defaults row
    EXPECT_EQ(not_applicable, 1);  // the encoder row has no encoder here
    EXPECT_FALSE(rep.rows.back().divergent);  // all-defaults row
    EXPECT_EQ(rep.rows.back().name, "All Specified Design Choices");
    // report file parses and has one line per row plus the header
    std::string text = read_file(report_path);
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'),
              static_cast<int64_t>(rep.rows.size()) + 1);
    fs::remove_all(base.out_dir);
}

TEST(Report, SummaryAndPlotsFromMetrics) {
    TrainConfig cfg = smoke_cfg(Family::baseline, Mode::continuous);
    cfg.max_steps = 6;
    cfg.eval_interval = 3;
    cfg.out_dir = temp_dir("report");
    {
        Trainer<float> t(cfg);
        t.run();
    }
    const std::string metrics = cfg.out_dir + "/" + cfg.metrics_file;
    const std::string summary = write_report(metrics, cfg.out_dir);
    EXPECT_NE(summary.find("min train loss"), std::string::npos);
    EXPECT_NE(summary.find("min val loss"), std::string::npos);
    EXPECT_TRUE(fs::exists(cfg.out_dir + "/loss_vs_steps.svg"));
    EXPECT_TRUE(fs::exists(cfg.out_dir + "/loss_vs_flops.svg"));
    // metrics stay parseable line by line (append-only contract)
    MetricsFile mf = parse_metrics_csv(metrics);
    EXPECT_GE(mf.points.size(), 6u);
    EXPECT_NE(mf.flops_convention.find("forward=2*P*T"), std::string::npos);
    fs::remove_all(cfg.out_dir);
}

TEST(Config, JsonRoundTrip) {
    TrainConfig cfg = preset_config("desk-discrete-ebwm");
    cfg.stop_at_val_metric = 2.5;
    Json j = config_to_json(cfg);
    TrainConfig back = config_from_json(j);
    EXPECT_EQ(config_to_json(back).dump(), j.dump());
}
