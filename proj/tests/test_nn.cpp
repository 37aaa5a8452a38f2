#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "ebwm/data.hpp"
#include "ebwm/nn.hpp"
#include "ebwm/objectives.hpp"
#include "ebwm/params.hpp"

using namespace ebwm;
using T64 = Tensor<double>;

namespace {

ModelConfig tiny_continuous(int64_t T = 4, int64_t d = 16, int64_t H = 2) {
    ModelConfig cfg;
    cfg.mode = Mode::continuous;
    cfg.embed_dim = d;
    cfg.heads = H;
    cfg.blocks = 2;
    cfg.context_length = T + 1;  // room for the appended-row oracle
    cfg.feature_dim = 8;
    return cfg;
}

SequenceBatch<double> random_batch(const ModelConfig& cfg, int64_t B, int64_t T,
                                   uint64_t seed) {
    ContinuousSpec spec;
    spec.feature_dim = cfg.feature_dim;
    spec.length = T;
    spec.batch = B;
    spec.gamma = 0.7;
    spec.seed = seed;
    return gen_continuous<double>(spec);
}

}  // namespace

TEST(Rotary, PositionZeroIsIdentity) {
    ebwm::Rng rng(1);
    T64 q = T64::randn({1, 1, 1, 8}, rng);
    T64 r = rotary_positions(q, {0});
    EXPECT_LT(max_abs_diff(q, r), 1e-15);
}

TEST(Rotary, PreservesNorm) {
    ebwm::Rng rng(2);
    T64 q = T64::randn({1, 1, 3, 8}, rng);
    T64 r = rotary_positions(q, {5, 11, 400});
    for (int64_t row = 0; row < 3; ++row) {
        double n0 = 0, n1 = 0;
        for (int64_t j = 0; j < 8; ++j) {
            n0 += q.data()[row * 8 + j] * q.data()[row * 8 + j];
            n1 += r.data()[row * 8 + j] * r.data()[row * 8 + j];
        }
        EXPECT_NEAR(n0, n1, 1e-12);
    }
}

TEST(Rotary, DotDependsOnlyOnOffset) {
    ebwm::Rng rng(3);
    T64 q = T64::randn({1, 1, 1, 8}, rng);
    T64 k = T64::randn({1, 1, 1, 8}, rng);
    auto dot_at = [&](int64_t i, int64_t j) {
        T64 qi = rotary_positions(q, {i});
        T64 kj = rotary_positions(k, {j});
        double acc = 0;
        for (int64_t t = 0; t < 8; ++t) acc += qi.data()[t] * kj.data()[t];
        return acc;
    };
    EXPECT_NEAR(dot_at(3, 1), dot_at(9, 7), 1e-10);
    EXPECT_NEAR(dot_at(12, 12), dot_at(0, 0), 1e-10);
    EXPECT_GT(std::abs(dot_at(4, 1) - dot_at(4, 2)), 1e-6);  // offsets do differ
}

TEST(Rotary, OddLastAxisRejected) {
    T64 q = T64::zeros({1, 1, 1, 7});
    EXPECT_THROW(rotary_positions(q, {0}), ShapeError);
}

TEST(Attention, SingleTokenAttendsItself) {
    ModelConfig cfg = tiny_continuous(1);
    auto w = init_weights<double>(Family::baseline, cfg, {}, 5);
    ebwm::Rng rng(6);
    T64 z = T64::randn({2, 1, cfg.embed_dim}, rng);
    T64 out = causal_attention(z, w, w.blocks[0], {0});
    // weight 1 on itself: out = V(z) through the output projection
    T64 v = linear(z, w.p(w.blocks[0].wv));
    T64 want = linear(v, w.p(w.blocks[0].wo));
    EXPECT_LT(max_abs_diff(out, want), 1e-12);
}

TEST(Attention, ZeroQKGivesUniformPrefixAverage) {
    ModelConfig cfg = tiny_continuous(4);
    auto w = init_weights<double>(Family::baseline, cfg, {}, 7);
    w.p(w.blocks[0].wq) = T64::zeros({cfg.embed_dim, cfg.embed_dim});
    w.p(w.blocks[0].wk) = T64::zeros({cfg.embed_dim, cfg.embed_dim});
    ebwm::Rng rng(8);
    const int64_t T = 4, d = cfg.embed_dim;
    T64 z = T64::randn({1, T, d}, rng);
    T64 out = causal_attention(z, w, w.blocks[0], {0, 1, 2, 3});
    T64 v = linear(z, w.p(w.blocks[0].wv));
    // row i of the context is the mean of v rows 0..i
    for (int64_t i = 0; i < T; ++i) {
        std::vector<double> mean_row(d, 0.0);
        for (int64_t j = 0; j <= i; ++j) {
            for (int64_t c = 0; c < d; ++c) mean_row[c] += v.data()[j * d + c];
        }
        for (auto& m : mean_row) m /= static_cast<double>(i + 1);
        T64 mr = T64::from({1, 1, d}, std::move(mean_row));
        T64 prj = linear(mr, w.p(w.blocks[0].wo));
        for (int64_t c = 0; c < d; ++c) {
            EXPECT_NEAR(out.data()[i * d + c], prj.data()[c], 1e-12);
        }
    }
}

TEST(Attention, CausalityPerturbationProbe) {
    ModelConfig cfg = tiny_continuous(4);
    auto w = init_weights<double>(Family::baseline, cfg, {}, 9);
    ebwm::Rng rng(10);
    const int64_t T = 4, d = cfg.embed_dim;
    T64 z = T64::randn({1, T, d}, rng);
    T64 base = causal_attention(z, w, w.blocks[0], {0, 1, 2, 3});
    T64 z2 = z.clone();
    for (int64_t c = 0; c < d; ++c) z2.data()[3 * d + c] += 0.5;  // perturb row 3
    T64 pert = causal_attention(z2, w, w.blocks[0], {0, 1, 2, 3});
    for (int64_t i = 0; i < 3; ++i) {
        for (int64_t c = 0; c < d; ++c) {
            EXPECT_EQ(base.data()[i * d + c], pert.data()[i * d + c]);
        }
    }
}

TEST(ArForward, CausalityAcrossFullModel) {
    ModelConfig cfg = tiny_continuous(6);
    auto w = init_weights<double>(Family::baseline, cfg, {}, 11);
    ebwm::Rng head_rng(990);
    w.p(w.head) = T64::randn({cfg.embed_dim, cfg.feature_dim}, head_rng, 0.2);
    SequenceBatch<double> batch = random_batch(cfg, 2, 6, 12);
    T64 base = ar_forward(batch, w);
    SequenceBatch<double> batch2 = batch;
    batch2.features = batch.features.clone();
    const int64_t F = cfg.feature_dim;
    // bump context position 4 of element 0
    for (int64_t c = 0; c < F; ++c) {
        batch2.features.data()[(0 * 7 + 4) * F + c] += 1.0;
    }
    T64 pert = ar_forward(batch2, w);
    for (int64_t i = 0; i < 4; ++i) {
        for (int64_t c = 0; c < F; ++c) {
            EXPECT_EQ(base.data()[i * F + c], pert.data()[i * F + c]);
        }
    }
    bool later_changed = false;
    for (int64_t i = 4; i < 6; ++i) {
        for (int64_t c = 0; c < F; ++c) {
            later_changed |= base.data()[i * F + c] != pert.data()[i * F + c];
        }
    }
    EXPECT_TRUE(later_changed);
}

TEST(ArForward, IdentityConstructionCopiesMostRecentFeature) {
    // zero the residual branches, wire embed/head to an identity round trip
    ModelConfig cfg = tiny_continuous(3);
    auto w = init_weights<double>(Family::baseline, cfg, {}, 13);
    const int64_t d = cfg.embed_dim, F = cfg.feature_dim;
    for (auto& bw : w.blocks) {
        w.p(bw.wo) = T64::zeros({d, d});
        w.p(bw.w_down) = T64::zeros({cfg.ff_hidden(), d});
    }
    T64 embed = T64::zeros({F, d});
    for (int64_t f = 0; f < F; ++f) embed.data()[f * d + f] = 1.0;
    w.p(w.embed) = embed;
    // final RMS norm rescales rows; undo it with the head built from the
    // known per-row norm of the embedded vector
    SequenceBatch<double> batch = random_batch(cfg, 1, 3, 14);
    T64 head = T64::zeros({d, F});
    w.p(w.head) = head;
    T64 out = ar_forward(batch, w);  // zero head: all-zero predictions
    for (int64_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out.data()[i], 0.0);

    // now check the residual-only path reproduces the embedded input before
    // the head: norm of prediction direction matches the input feature row
    T64 ctx = batch.context_features();
    T64 emb = linear(ctx, w.p(w.embed));
    T64 normed = rmsnorm_scaled(emb, w.p(w.final_norm), cfg.rms_eps);
    for (int64_t t = 0; t < 3; ++t) {
        // embedded row = (x, 0...0): rms-normalized keeps direction
        double dot = 0, nx = 0, ny = 0;
        for (int64_t f = 0; f < F; ++f) {
            const double a = ctx.data()[t * F + f];
            const double b = normed.data()[t * d + f];
            dot += a * b;
            nx += a * a;
            ny += b * b;
        }
        EXPECT_NEAR(dot / std::sqrt(nx * ny), 1.0, 1e-9);
    }
}

TEST(ArForward, ZeroHeadUniformLogitsGiveLnV) {
    ModelConfig cfg;
    cfg.mode = Mode::discrete;
    cfg.embed_dim = 16;
    cfg.heads = 2;
    cfg.blocks = 1;
    cfg.context_length = 8;
    cfg.vocab_size = 11;
    auto w = init_weights<double>(Family::baseline, cfg, {}, 15);
    SequenceBatch<double> batch;
    batch.mode = Mode::discrete;
    batch.batch = 2;
    batch.context = 5;
    ebwm::Rng rng(16);
    batch.tokens.resize(2 * 6);
    for (auto& t : batch.tokens) t = rng.below(11);
    T64 logits = ar_forward(batch, w);  // head is zero-initialized
    for (int64_t i = 0; i < logits.numel(); ++i) EXPECT_EQ(logits.data()[i], 0.0);
    T64 ce = cross_entropy_logits(logits, batch.target_tokens());
    EXPECT_NEAR(ce.item(), std::log(11.0), 1e-12);
}

TEST(Blocks, ZeroBranchesYieldIdentityBlock) {
    ModelConfig cfg = tiny_continuous(3);
    auto w = init_weights<double>(Family::baseline, cfg, {}, 17);
    const int64_t d = cfg.embed_dim;
    w.p(w.blocks[0].wo) = T64::zeros({d, d});
    w.p(w.blocks[0].w_down) = T64::zeros({cfg.ff_hidden(), d});
    ebwm::Rng rng(18);
    T64 x = T64::randn({2, 3, d}, rng);
    T64 y = block_forward(x, w, w.blocks[0], {0, 1, 2});
    EXPECT_LT(max_abs_diff(x, y), 1e-15);
}

TEST(Params, CountMatchesClosedFormLlamaScale) {
    ModelConfig cfg;
    cfg.mode = Mode::discrete;
    cfg.embed_dim = 768;
    cfg.heads = 12;
    cfg.blocks = 12;
    cfg.context_length = 256;
    cfg.vocab_size = 50277;
    // audit the formula by summing the actually allocated shapes
    auto w = init_weights<double>(Family::baseline, cfg, {}, 19);
    EXPECT_EQ(w.store.total_scalars(), param_count_formula(Family::baseline, cfg));
    // hidden width 8d/3 = 2048 exactly at d = 768
    EXPECT_EQ(cfg.ff_hidden(), 2048);

    MCMCConfig mc;
    auto we = init_weights<double>(Family::ebwm, cfg, mc, 19);
    EXPECT_EQ(we.store.total_scalars(), param_count_formula(Family::ebwm, cfg, mc));

    cfg.separate_prediction_projections = true;
    auto ws = init_weights<double>(Family::ebwm, cfg, mc, 19);
    EXPECT_EQ(ws.store.total_scalars(), param_count_formula(Family::ebwm, cfg, mc));
}

TEST(Params, CheckpointRoundTrip) {
    ModelConfig cfg = tiny_continuous(4);
    auto w = init_weights<double>(Family::ebwm, cfg, {}, 21);
    const auto path = std::filesystem::temp_directory_path() / "ebwm_ckpt_test.bin";
    checkpoint_save(path.string(), w.store);

    auto w2 = init_weights<double>(Family::ebwm, cfg, {}, 22);  // different values
    bool differed = false;
    for (size_t i = 0; i < w.store.size(); ++i) {
        differed |= max_abs_diff(w.store.param(i).value, w2.store.param(i).value) > 0;
    }
    EXPECT_TRUE(differed);
    checkpoint_load(path.string(), w2.store);
    for (size_t i = 0; i < w.store.size(); ++i) {
        EXPECT_EQ(max_abs_diff(w.store.param(i).value, w2.store.param(i).value), 0.0);
    }
    // version byte first
    std::ifstream is(path, std::ios::binary);
    EXPECT_EQ(is.get(), 1);
    std::filesystem::remove(path);
}

TEST(Params, CheckpointShapeMismatchRejected) {
    ModelConfig cfg = tiny_continuous(4);
    auto w = init_weights<double>(Family::baseline, cfg, {}, 23);
    const auto path = std::filesystem::temp_directory_path() / "ebwm_ckpt_bad.bin";
    checkpoint_save(path.string(), w.store);
    ModelConfig other = cfg;
    other.embed_dim = 32;
    auto w2 = init_weights<double>(Family::baseline, other, {}, 23);
    EXPECT_THROW(checkpoint_load(path.string(), w2.store), Error);
    std::filesystem::remove(path);
}

TEST(Config, PresetsCarryPaperValues) {
    auto cv = preset_config("cv-paper-ebwm");
    EXPECT_EQ(cv.model.blocks, 12);
    EXPECT_EQ(cv.model.heads, 12);
    EXPECT_EQ(cv.model.context_length, 16);
    EXPECT_EQ(cv.mcmc.steps, 4);
    EXPECT_DOUBLE_EQ(cv.mcmc.alpha_init, 3e4);
    EXPECT_DOUBLE_EQ(cv.mcmc.alpha_lr_multiplier, 2e5);
    EXPECT_DOUBLE_EQ(cv.loss.reconstruction_coefficient, 60.0);
    EXPECT_DOUBLE_EQ(cv.loss.energy_loss_coefficient, 0.0);
    EXPECT_DOUBLE_EQ(cv.weight_decay, 0.01);
    EXPECT_DOUBLE_EQ(cv.grad_clip, 1.0);
    EXPECT_EQ(cv.warmup_steps, 10000);
    EXPECT_DOUBLE_EQ(cv.warmup_divider, 20.0);
    EXPECT_DOUBLE_EQ(cv.min_lr_scale, 10.0);
    EXPECT_EQ(cv.seed, 33u);

    auto nlp = preset_config("nlp-paper-ebwm");
    EXPECT_EQ(nlp.model.context_length, 256);
    EXPECT_EQ(nlp.model.vocab_size, 50277);
    EXPECT_EQ(nlp.mcmc.steps, 2);
    EXPECT_DOUBLE_EQ(nlp.mcmc.alpha_init, 3e5);
    EXPECT_DOUBLE_EQ(nlp.mcmc.alpha_lr_multiplier, 2e6);
    EXPECT_EQ(nlp.effective_batch_size, 72);

    auto nb = preset_config("nlp-paper-baseline");
    EXPECT_DOUBLE_EQ(nb.base_lr, 6e-4);
    EXPECT_EQ(nb.effective_batch_size, 384);
}

TEST(Config, UnknownKeysArePointedAt) {
    Json j = {{"model", {{"embed_dims", 64}}}};
    try {
        config_from_json(j);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("model.embed_dims"), std::string::npos);
    }
}

TEST(Config, ModeFieldConsistencyEnforced) {
    ModelConfig cfg;
    cfg.mode = Mode::discrete;
    cfg.vocab_size = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.vocab_size = 100;
    cfg.feature_dim = 4;
    EXPECT_THROW(cfg.validate(), ConfigError);
}
