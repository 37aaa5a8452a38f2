#include <gtest/gtest.h>

#include "ebwm/data.hpp"
#include "ebwm/ebt.hpp"
#include "ebwm/gradcheck.hpp"
#include "ebwm/objectives.hpp"

using namespace ebwm;
using T64 = Tensor<double>;

namespace {

ModelConfig ebt_cfg(int64_t T, int64_t d, int64_t H, int64_t L = 2, int64_t F = 8) {
    ModelConfig cfg;
    cfg.mode = Mode::continuous;
    cfg.embed_dim = d;
    cfg.heads = H;
    cfg.blocks = L;
    cfg.context_length = T + 1;  // oracle appends one row
    cfg.feature_dim = F;
    return cfg;
}

SequenceBatch<double> make_batch(const ModelConfig& cfg, int64_t B, int64_t T,
                                 uint64_t seed) {
    ContinuousSpec spec;
    spec.feature_dim = cfg.feature_dim;
    spec.length = T;
    spec.batch = B;
    spec.gamma = 0.8;
    spec.seed = seed;
    return gen_continuous<double>(spec);
}

std::vector<int64_t> iota_positions(int64_t T, int64_t offset = 0) {
    std::vector<int64_t> p(T);
    for (int64_t t = 0; t < T; ++t) p[t] = t + offset;
    return p;
}

}  // namespace

TEST(EbtAttention, ScoresMatrixIsTByTPlusOne) {
    const int64_t T = 5;
    T64 allowed = detail::allowed_mask<double>(T);
    EXPECT_EQ(allowed.shape(), (Shape{T, T + 1}));
    // row i allows exactly columns 0..i plus the superdiagonal i+1
    for (int64_t i = 0; i < T; ++i) {
        for (int64_t j = 0; j <= T; ++j) {
            const double want = (j <= i || j == i + 1) ? 1.0 : 0.0;
            EXPECT_EQ(allowed.data()[i * (T + 1) + j], want);
        }
    }
}

TEST(EbtAttention, SingleStepZeroQkSplitsMassEvenly) {
    // T=1, zero Q and K: the only row softmaxes over {z_1, z_hat_2} with equal
    // logits, so z_p gets 0.5 V_o[0] + 0.5 V_p[0] before the output projection
    ModelConfig cfg = ebt_cfg(1, 8, 1);
    auto w = init_weights<double>(Family::ebwm, cfg, {}, 31);
    const int64_t d = cfg.embed_dim;
    w.p(w.blocks[0].wq) = T64::zeros({d, d});
    w.p(w.blocks[0].wk) = T64::zeros({d, d});
    // identity Wo so the pre-projection combination is visible
    T64 eye = T64::zeros({d, d});
    for (int64_t i = 0; i < d; ++i) eye.data()[i * d + i] = 1.0;
    w.p(w.blocks[0].wo) = eye;

    ebwm::Rng rng(32);
    T64 z_o = T64::randn({1, 1, d}, rng);
    T64 z_p = T64::randn({1, 1, d}, rng);
    auto [out_o, out_p] = ebt_attention(z_o, z_p, w, w.blocks[0], {0}, {1});
    T64 vo = linear(z_o, w.p(w.blocks[0].wv));
    T64 vp = linear(z_p, w.p(w.blocks[0].wv));
    for (int64_t c = 0; c < d; ++c) {
        EXPECT_NEAR(out_p.data()[c], 0.5 * vo.data()[c] + 0.5 * vp.data()[c], 1e-12);
    }
    (void)out_o;
}

TEST(EbtAttention, MatchesAppendedSequenceOracle) {
    // batched output row i == last row of standard attention over
    // [z_o rows 0..i, z_p row i]
    for (int64_t H : {1, 2}) {
        ModelConfig cfg = ebt_cfg(3, 8, H);
        auto w = init_weights<double>(Family::ebwm, cfg, {}, 40 + H);
        ebwm::Rng rng(50 + H);
        const int64_t B = 1, T = 3, d = cfg.embed_dim;
        T64 z_o = T64::randn({B, T, d}, rng);
        T64 z_p = T64::randn({B, T, d}, rng);
        auto [out_o, out_p] =
            ebt_attention(z_o, z_p, w, w.blocks[0], iota_positions(T), iota_positions(T, 1));
        for (int64_t i = 0; i < T; ++i) {
            T64 want = ebt_attention_row_oracle(z_o, z_p, 0, i, w, w.blocks[0]);
            for (int64_t c = 0; c < d; ++c) {
                EXPECT_NEAR(out_p.data()[i * d + c], want.data()[c], 1e-9)
                    << "row " << i << " head count " << H;
            }
        }
        (void)out_o;
    }
}

TEST(EbtAttention, ObservedStreamBitIdenticalToBaselineAttention) {
    ModelConfig cfg = ebt_cfg(4, 16, 2);
    auto w = init_weights<double>(Family::ebwm, cfg, {}, 60);
    ebwm::Rng rng(61);
    T64 z_o = T64::randn({2, 4, 16}, rng);
    T64 z_p = T64::randn({2, 4, 16}, rng);
    auto [out_o, out_p] =
        ebt_attention(z_o, z_p, w, w.blocks[0], iota_positions(4), iota_positions(4, 1));
    T64 base = causal_attention(z_o, w, w.blocks[0], iota_positions(4));
    EXPECT_EQ(max_abs_diff(out_o, base), 0.0);
    (void)out_p;
}

TEST(EbtStack, ObservedStreamEquivalentAcrossBlocks) {
    // 50 random tiny cases: the z_o stream after the full EBT stack matches
    // the baseline causal stack on the same inputs and weights
    for (int run = 0; run < 50; ++run) {
        ModelConfig cfg = ebt_cfg(3, 8, 2, 2, 4);
        auto w = init_weights<double>(Family::ebwm, cfg, {}, 100 + run);
        ebwm::Rng rng(200 + run);
        const int64_t B = 1, T = 3, d = cfg.embed_dim;
        T64 z_o = T64::randn({B, T, d}, rng);
        T64 z_p = T64::randn({B, T, d}, rng);
        Tensor z_o_ebt = z_o, z_p_ebt = z_p;
        for (const auto& bw : w.blocks) {
            std::tie(z_o_ebt, z_p_ebt) =
                ebt_block(z_o_ebt, z_p_ebt, w, bw, iota_positions(T), iota_positions(T, 1));
        }
        T64 z_base = z_o;
        for (const auto& bw : w.blocks) {
            z_base = block_forward(z_base, w, bw, iota_positions(T));
        }
        EXPECT_LE(max_abs_diff(z_o_ebt, z_base), 1e-12);
    }
}

TEST(EnergyForward, ZeroHeadGivesZeroEnergies) {
    ModelConfig cfg = ebt_cfg(4, 16, 2);
    auto w = init_weights<double>(Family::ebwm, cfg, {}, 70);  // head zero-initialized
    SequenceBatch<double> batch = make_batch(cfg, 2, 4, 71);
    ebwm::Rng rng(72);
    T64 cand = T64::randn({2, 4, cfg.feature_dim}, rng);
    auto e = energy_forward(batch, cand, w);
    EXPECT_EQ(e.energies.shape(), (Shape{2, 4}));
    for (int64_t i = 0; i < e.energies.numel(); ++i) {
        EXPECT_EQ(e.energies.data()[i], 0.0);
    }
    EXPECT_EQ(e.total.item(), 0.0);
}

TEST(EnergyForward, PerturbingCandidateRowTouchesOnlyItsEnergy) {
    ModelConfig cfg = ebt_cfg(5, 16, 2);
    auto w = init_weights<double>(Family::ebwm, cfg, {}, 80);
    ebwm::Rng rng(81);
    // non-trivial energy head
    w.p(w.energy_head) = T64::randn({cfg.embed_dim, 1}, rng, 0.3);
    SequenceBatch<double> batch = make_batch(cfg, 2, 5, 82);
    T64 cand = T64::randn({2, 5, cfg.feature_dim}, rng);
    auto base = energy_forward(batch, cand, w);
    T64 cand2 = cand.clone();
    const int64_t row = 2, F = cfg.feature_dim;
    for (int64_t c = 0; c < F; ++c) cand2.data()[(0 * 5 + row) * F + c] += 0.7;
    auto pert = energy_forward(batch, cand2, w);
    for (int64_t b = 0; b < 2; ++b) {
        for (int64_t i = 0; i < 5; ++i) {
            if (b == 0 && i == row) {
                EXPECT_NE(base.energies.data()[b * 5 + i], pert.energies.data()[b * 5 + i]);
            } else {
                EXPECT_EQ(base.energies.data()[b * 5 + i], pert.energies.data()[b * 5 + i]);
            }
        }
    }
}

TEST(EnergyForward, PerturbingContextRowTouchesOnlyLaterEnergies) {
    ModelConfig cfg = ebt_cfg(5, 16, 2);
    auto w = init_weights<double>(Family::ebwm, cfg, {}, 90);
    ebwm::Rng rng(91);
    w.p(w.energy_head) = T64::randn({cfg.embed_dim, 1}, rng, 0.3);
    SequenceBatch<double> batch = make_batch(cfg, 1, 5, 92);
    T64 cand = T64::randn({1, 5, cfg.feature_dim}, rng);
    auto base = energy_forward(batch, cand, w);
    SequenceBatch<double> batch2 = batch;
    batch2.features = batch.features.clone();
    const int64_t j = 3, F = cfg.feature_dim;
    for (int64_t c = 0; c < F; ++c) batch2.features.data()[(0 * 6 + j) * F + c] += 0.9;
    auto pert = energy_forward(batch2, cand, w);
    for (int64_t i = 0; i < 5; ++i) {
        if (i < j) {
            EXPECT_EQ(base.energies.data()[i], pert.energies.data()[i]) << "i=" << i;
        }
    }
    EXPECT_NE(base.energies.data()[j], pert.energies.data()[j]);
}

TEST(EnergyForward, EnergyLocalityViaAutodiff) {
    // d energies[i] / d z_p[k] = 0 for k != i
    ModelConfig cfg = ebt_cfg(4, 16, 2);
    auto w = init_weights<double>(Family::ebwm, cfg, {}, 95);
    ebwm::Rng rng(96);
    w.p(w.energy_head) = T64::randn({cfg.embed_dim, 1}, rng, 0.3);
    SequenceBatch<double> batch = make_batch(cfg, 1, 4, 97);
    T64 cand = T64::randn({1, 4, cfg.feature_dim}, rng);

    const int64_t probe_row = 1;
    Tape<double> tape;
    TapeScope<double> scope(tape);
    w.store.watch_all(tape);
    tape.watch(cand);
    auto e = energy_forward(batch, cand, w);
    // pick energies[0, probe_row]
    T64 picked = slice(slice(e.energies, 1, probe_row, 1), 0, 0, 1);
    auto g = tape.grad(reshape(picked, Shape{}), {cand}, false);
    const int64_t F = cfg.feature_dim;
    for (int64_t i = 0; i < 4; ++i) {
        double row_norm = 0;
        for (int64_t c = 0; c < F; ++c) {
            row_norm += std::abs(g[0].data()[i * F + c]);
        }
        if (i == probe_row) {
            EXPECT_GT(row_norm, 1e-8);
        } else {
            EXPECT_EQ(row_norm, 0.0);
        }
    }
}

TEST(EnergyForward, BatchPermutationPermutesEnergies) {
    ModelConfig cfg = ebt_cfg(3, 16, 2);
    auto w = init_weights<double>(Family::ebwm, cfg, {}, 98);
    ebwm::Rng rng(99);
    w.p(w.energy_head) = T64::randn({cfg.embed_dim, 1}, rng, 0.3);
    SequenceBatch<double> batch = make_batch(cfg, 3, 3, 100);
    T64 cand = T64::randn({3, 3, cfg.feature_dim}, rng);
    auto base = energy_forward(batch, cand, w);

    // swap batch elements 0 and 2
    auto swap_batch = [&](const T64& x, int64_t rows) {
        T64 y = x.clone();
        const int64_t stride = rows * x.shape().back();
        for (int64_t i = 0; i < stride; ++i) {
            std::swap(y.data()[0 * stride + i], y.data()[2 * stride + i]);
        }
        return y;
    };
    SequenceBatch<double> batch2 = batch;
    batch2.features = swap_batch(batch.features, 4);
    T64 cand2 = swap_batch(cand, 3);
    auto pert = energy_forward(batch2, cand2, w);
    for (int64_t i = 0; i < 3; ++i) {
        EXPECT_EQ(base.energies.data()[0 * 3 + i], pert.energies.data()[2 * 3 + i]);
        EXPECT_EQ(base.energies.data()[2 * 3 + i], pert.energies.data()[0 * 3 + i]);
        EXPECT_EQ(base.energies.data()[1 * 3 + i], pert.energies.data()[1 * 3 + i]);
    }
}

TEST(EnergyForward, RejectsNonFiniteCandidate) {
    ModelConfig cfg = ebt_cfg(3, 16, 2);
    auto w = init_weights<double>(Family::ebwm, cfg, {}, 101);
    SequenceBatch<double> batch = make_batch(cfg, 1, 3, 102);
    T64 cand = T64::zeros({1, 3, cfg.feature_dim});
    cand.data()[0] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(energy_forward(batch, cand, w), ValueError);
}

TEST(EnergyForward, GradientMatchesFiniteDifferences) {
    // d(total energy)/d(candidate) against central differences, f64
    ModelConfig cfg = ebt_cfg(3, 16, 2, 2, 6);
    auto w = init_weights<double>(Family::ebwm, cfg, {}, 103);
    ebwm::Rng rng(104);
    w.p(w.energy_head) = T64::randn({cfg.embed_dim, 1}, rng, 0.3);
    SequenceBatch<double> batch = make_batch(cfg, 1, 3, 105);
    T64 cand = T64::randn({1, 3, cfg.feature_dim}, rng);
    const double err = finite_difference_check<double>(
        [&](const T64& c) { return energy_forward(batch, c, w).total; }, cand, 1e-5);
    EXPECT_LT(err, 1e-5);
}

TEST(DecodeCandidate, ZeroDecoderIsUniform) {
    ModelConfig cfg;
    cfg.mode = Mode::discrete;
    cfg.embed_dim = 16;
    cfg.heads = 2;
    cfg.blocks = 1;
    cfg.context_length = 8;
    cfg.vocab_size = 13;
    auto w = init_weights<double>(Family::ebwm, cfg, {}, 110);
    ebwm::Rng rng(111);
    T64 cand = T64::randn({2, 4, 16}, rng);
    T64 logits = decode_candidate(cand, w);
    for (int64_t i = 0; i < logits.numel(); ++i) EXPECT_EQ(logits.data()[i], 0.0);
    std::vector<int64_t> targets(8, 3);
    EXPECT_NEAR(cross_entropy_next_token(cand, targets, w).item(), std::log(13.0), 1e-12);
}

TEST(DecodeCandidate, OrthogonalEmbeddingRoundTrip) {
    // decoder = transpose of a one-hot embedding table: a candidate equal to
    // token t's embedding decodes to argmax t
    ModelConfig cfg;
    cfg.mode = Mode::discrete;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.blocks = 1;
    cfg.context_length = 4;
    cfg.vocab_size = 8;
    auto w = init_weights<double>(Family::ebwm, cfg, {}, 112);
    T64 table = T64::zeros({8, 8});
    for (int64_t t = 0; t < 8; ++t) table.data()[t * 8 + t] = 1.0;
    w.p(w.embed) = table;
    w.p(w.head) = transpose(table, 0, 1);
    for (int64_t t = 0; t < 8; ++t) {
        T64 cand = T64::zeros({8});
        cand.data()[t] = 1.0;
        T64 logits = decode_candidate(cand, w);
        int64_t argmax = 0;
        for (int64_t v = 1; v < 8; ++v) {
            if (logits.data()[v] > logits.data()[argmax]) argmax = v;
        }
        EXPECT_EQ(argmax, t);
    }
    // continuous-mode call is an error
    ModelConfig cc = ebt_cfg(3, 8, 2);
    auto wc = init_weights<double>(Family::ebwm, cc, {}, 113);
    EXPECT_THROW(decode_candidate(T64::zeros({1, 3, 8}), wc), ConfigError);
}

TEST(DecodeCandidate, CeGradientWrtCandidateMatchesFd) {
    ModelConfig cfg;
    cfg.mode = Mode::discrete;
    cfg.embed_dim = 12;
    cfg.heads = 2;
    cfg.blocks = 1;
    cfg.context_length = 6;
    cfg.vocab_size = 9;
    auto w = init_weights<double>(Family::ebwm, cfg, {}, 114);
    ebwm::Rng rng(115);
    w.p(w.head) = T64::randn({12, 9}, rng, 0.5);
    std::vector<int64_t> targets = {1, 7, 3, 0};
    T64 cand = T64::randn({1, 4, 12}, rng);
    const double err = finite_difference_check<double>(
        [&](const T64& c) { return cross_entropy_next_token(c, targets, w); }, cand, 1e-5);
    EXPECT_LT(err, 1e-5);
}
