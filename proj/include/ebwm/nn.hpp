#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ebwm/config.hpp"
#include "ebwm/data.hpp"
#include "ebwm/ops.hpp"
#include "ebwm/params.hpp"

namespace ebwm {

// ---------------------------------------------------------------------------
// Llama-style building blocks: RMS pre-norm, rotary positions, gated SiLU
// feedforward. The same recipe backs the autoregressive baseline and the
// energy model so scaling comparisons are apples to apples.
// ---------------------------------------------------------------------------

struct BlockWeights {
    int64_t wq = -1, wk = -1, wv = -1, wo = -1;
    int64_t w_gate = -1, w_up = -1, w_down = -1;
    int64_t attn_norm = -1, ff_norm = -1;
    // optional separate projections for the prediction stream
    int64_t wq_p = -1, wk_p = -1, wv_p = -1;
};

template <class S>
struct ModelWeights {
    Family family = Family::baseline;
    ModelConfig cfg;
    MCMCConfig mcmc;  // step-size parameterization lives with the weights
    ParamStore<S> store;

    int64_t embed = -1;       // [V,d] token table or [F,d] input projection
    std::vector<BlockWeights> blocks;
    int64_t final_norm = -1;
    int64_t head = -1;        // baseline output head (untied), or the decoder
    int64_t energy_head = -1; // [d,1]
    int64_t alpha_raw = -1;   // scalar or [K] when per-step
    int64_t sigma_raw = -1;   // Langevin noise scale when learnable

    Tensor<S>& p(int64_t idx) { return store[idx]; }
    const Tensor<S>& p(int64_t idx) const { return store[idx]; }
};

// Rotation tables for explicit position indices; half-split pairing
// (x_j, x_{j+dh/2}) rotated by pos * theta_j, theta_j = base^(-2j/dh).
template <class S>
std::pair<Tensor<S>, Tensor<S>> rotary_tables(const std::vector<int64_t>& positions,
                                              int64_t head_dim, double base = 10000.0) {
    if (head_dim % 2 != 0) {
        throw ShapeError("rotary: last axis must be even");
    }
    const int64_t half = head_dim / 2;
    const int64_t T = static_cast<int64_t>(positions.size());
    std::vector<double> freqs(half);
    const double step = std::pow(base, -2.0 / static_cast<double>(head_dim));
    double f = 1.0;
    for (int64_t j = 0; j < half; ++j, f *= step) freqs[j] = f;
    Tensor<S> cos_t = Tensor<S>::zeros({T, half});
    Tensor<S> sin_t = Tensor<S>::zeros({T, half});
    for (int64_t t = 0; t < T; ++t) {
        for (int64_t j = 0; j < half; ++j) {
            const double angle = static_cast<double>(positions[t]) * freqs[j];
            cos_t.data()[t * half + j] = static_cast<S>(std::cos(angle));
            sin_t.data()[t * half + j] = static_cast<S>(std::sin(angle));
        }
    }
    return {cos_t, sin_t};
}

// x: [B,H,T,dh]; cos/sin: [T,dh/2] broadcast over batch and heads.
template <class S>
Tensor<S> apply_rotary(const Tensor<S>& x, const Tensor<S>& cos_t, const Tensor<S>& sin_t) {
    const int64_t dh = x.shape().back();
    if (dh % 2 != 0) throw ShapeError("rotary: last axis must be even");
    const int64_t half = dh / 2;
    Tensor<S> x1 = slice(x, -1, 0, half);
    Tensor<S> x2 = slice(x, -1, half, half);
    Tensor<S> r1 = sub(mul(x1, cos_t), mul(x2, sin_t));
    Tensor<S> r2 = add(mul(x1, sin_t), mul(x2, cos_t));
    return concat<S>({r1, r2}, -1);
}

template <class S>
Tensor<S> rotary_positions(const Tensor<S>& q_or_k, const std::vector<int64_t>& positions,
                           double base = 10000.0) {
    auto [cos_t, sin_t] = rotary_tables<S>(positions, q_or_k.shape().back(), base);
    return apply_rotary(q_or_k, cos_t, sin_t);
}

template <class S>
Tensor<S> causal_mask(int64_t T) {
    Tensor<S> m = Tensor<S>::zeros({T, T});
    for (int64_t i = 0; i < T; ++i) {
        for (int64_t j = 0; j <= i; ++j) m.data()[i * T + j] = S(1);
    }
    return m;
}

// [B,T,din] x [din,dout] -> [B,T,dout]
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w) {
    const int64_t B = x.shape()[0], T = x.shape()[1], din = x.shape()[2];
    Tensor<S> flat = reshape(x, {B * T, din});
    return reshape(matmul(flat, w), {B, T, w.shape()[1]});
}

template <class S>
Tensor<S> split_heads(const Tensor<S>& x, int64_t heads) {
    const int64_t B = x.shape()[0], T = x.shape()[1], d = x.shape()[2];
    return transpose(reshape(x, {B, T, heads, d / heads}), 1, 2);  // [B,H,T,dh]
}

template <class S>
Tensor<S> merge_heads(const Tensor<S>& x) {
    const int64_t B = x.shape()[0], H = x.shape()[1], T = x.shape()[2], dh = x.shape()[3];
    return reshape(transpose(x, 1, 2), {B, T, H * dh});
}

template <class S>
Tensor<S> scaled_scores(const Tensor<S>& q, const Tensor<S>& k) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(q.shape().back()));
    return mul_scalar(batched_matmul(q, transpose(k, -1, -2)), inv);
}

// Standard masked attention given projected streams; shared by the baseline
// path and the observed stream of the energy model.
template <class S>
Tensor<S> attention_with_mask(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                              const Tensor<S>& mask, const Tensor<S>& wo) {
    Tensor<S> probs = masked_softmax(scaled_scores(q, k), mask);
    Tensor<S> ctx = merge_heads(batched_matmul(probs, v));
    const int64_t B = ctx.shape()[0], T = ctx.shape()[1], d = ctx.shape()[2];
    return reshape(matmul(reshape(ctx, {B * T, d}), wo), {B, T, d});
}

// Causal self-attention over z: row i attends rows <= i.
template <class S>
Tensor<S> causal_attention(const Tensor<S>& z, ModelWeights<S>& w, const BlockWeights& bw,
                           const std::vector<int64_t>& positions) {
    const int64_t T = z.shape()[1];
    if (T > w.cfg.context_length) {
        throw ShapeError(strf("attention: sequence length %lld exceeds context %lld",
                              static_cast<long long>(T),
                              static_cast<long long>(w.cfg.context_length)));
    }
    if (static_cast<int64_t>(positions.size()) != T) {
        throw ShapeError("attention: positions length must match sequence length");
    }
    auto [cos_t, sin_t] = rotary_tables<S>(positions, w.cfg.head_dim());
    Tensor<S> q = apply_rotary(split_heads(linear(z, w.p(bw.wq)), w.cfg.heads), cos_t, sin_t);
    Tensor<S> k = apply_rotary(split_heads(linear(z, w.p(bw.wk)), w.cfg.heads), cos_t, sin_t);
    Tensor<S> v = split_heads(linear(z, w.p(bw.wv)), w.cfg.heads);
    return attention_with_mask(q, k, v, causal_mask<S>(T), w.p(bw.wo));
}

template <class S>
Tensor<S> rmsnorm_scaled(const Tensor<S>& x, const Tensor<S>& scale, double eps) {
    return mul(rms_normalize(x, eps), scale);
}

template <class S>
Tensor<S> gated_ff(const Tensor<S>& x, ModelWeights<S>& w, const BlockWeights& bw) {
    Tensor<S> gate = silu(linear(x, w.p(bw.w_gate)));
    Tensor<S> up = linear(x, w.p(bw.w_up));
    return linear(mul(gate, up), w.p(bw.w_down));
}

// Pre-norm residual block: x + attn(norm(x)), then x + ff(norm(x)).
template <class S>
Tensor<S> block_forward(const Tensor<S>& x, ModelWeights<S>& w, const BlockWeights& bw,
                        const std::vector<int64_t>& positions) {
    Tensor<S> h = add(x, causal_attention(rmsnorm_scaled(x, w.p(bw.attn_norm), w.cfg.rms_eps),
                                          w, bw, positions));
    return add(h, gated_ff(rmsnorm_scaled(h, w.p(bw.ff_norm), w.cfg.rms_eps), w, bw));
}

// ---------------------------------------------------------------------------
// weight construction
// ---------------------------------------------------------------------------

template <class S>
ModelWeights<S> init_weights(Family family, const ModelConfig& cfg, const MCMCConfig& mcmc,
                             uint64_t seed) {
    cfg.validate();
    ModelWeights<S> w;
    w.family = family;
    w.cfg = cfg;
    w.mcmc = mcmc;
    Rng rng(seed);
    const int64_t d = cfg.embed_dim;
    const int64_t h = cfg.ff_hidden();
    const double std = cfg.init_std;

    auto mat = [&](Shape shape) { return Tensor<S>::randn(shape, rng, std); };

    if (cfg.mode == Mode::discrete) {
        w.embed = w.store.add("embed.table", mat({cfg.vocab_size, d}), {.no_decay = true});
    } else {
        w.embed = w.store.add("embed.proj", mat({cfg.feature_dim, d}));
    }
    for (int64_t l = 0; l < cfg.blocks; ++l) {
        BlockWeights bw;
        const std::string base = strf("blocks.%lld.", static_cast<long long>(l));
        bw.wq = w.store.add(base + "attn.wq", mat({d, d}));
        bw.wk = w.store.add(base + "attn.wk", mat({d, d}));
        bw.wv = w.store.add(base + "attn.wv", mat({d, d}));
        bw.wo = w.store.add(base + "attn.wo", mat({d, d}));
        if (family == Family::ebwm && cfg.separate_prediction_projections) {
            bw.wq_p = w.store.add(base + "attn.wq_p", mat({d, d}));
            bw.wk_p = w.store.add(base + "attn.wk_p", mat({d, d}));
            bw.wv_p = w.store.add(base + "attn.wv_p", mat({d, d}));
        }
        bw.w_gate = w.store.add(base + "ff.gate", mat({d, h}));
        bw.w_up = w.store.add(base + "ff.up", mat({d, h}));
        bw.w_down = w.store.add(base + "ff.down", mat({h, d}));
        bw.attn_norm = w.store.add(base + "attn_norm", ones<S>({d}), {.no_decay = true});
        bw.ff_norm = w.store.add(base + "ff_norm", ones<S>({d}), {.no_decay = true});
        w.blocks.push_back(bw);
    }
    w.final_norm = w.store.add("final_norm", ones<S>({d}), {.no_decay = true});

    if (family == Family::baseline) {
        // zero-init head: uniform logits / zero predictions at initialization
        if (cfg.mode == Mode::discrete) {
            if (!cfg.tie_embedding_head) {
                w.head = w.store.add("head", Tensor<S>::zeros({d, cfg.vocab_size}));
            }
        } else {
            w.head = w.store.add("head", Tensor<S>::zeros({d, cfg.feature_dim}));
        }
    } else {
        w.energy_head = w.store.add("energy_head", Tensor<S>::zeros({d, 1}));
        if (cfg.mode == Mode::discrete && !cfg.tie_embedding_head) {
            w.head = w.store.add("decoder", Tensor<S>::zeros({d, cfg.vocab_size}));
        }
        double a0 = mcmc.alpha_init;
        if (mcmc.alpha_learnable) {
            // stored through softplus; invert the init so softplus(raw) = alpha_init
            a0 = a0 > 30.0 ? a0 : std::log(std::expm1(a0));
        }
        const int64_t k = mcmc.alpha_per_step ? mcmc.steps : 1;
        w.alpha_raw = w.store.add("mcmc.alpha_raw", Tensor<S>::full({k}, static_cast<S>(a0)),
                                  {.no_decay = true, .alpha_group = true});
        if (mcmc.noise_learnable) {
            double s0 = mcmc.noise_scale;
            s0 = s0 > 30.0 ? s0 : std::log(std::expm1(std::max(s0, 1e-8)));
            w.sigma_raw = w.store.add("mcmc.sigma_raw", Tensor<S>::full({1}, static_cast<S>(s0)),
                                      {.no_decay = true, .alpha_group = true});
        }
    }
    return w;
}

// Closed-form parameter count for the block composition; audited against the
// summed shapes in tests.
inline int64_t param_count_formula(Family family, const ModelConfig& cfg,
                                   const MCMCConfig& mcmc = {}) {
    const int64_t d = cfg.embed_dim;
    const int64_t h = cfg.ff_hidden();
    int64_t per_block = 4 * d * d + 3 * d * h + 2 * d;
    if (family == Family::ebwm && cfg.separate_prediction_projections) {
        per_block += 3 * d * d;
    }
    int64_t total = cfg.blocks * per_block + d;  // blocks + final norm
    total += (cfg.mode == Mode::discrete ? cfg.vocab_size : cfg.feature_dim) * d;
    if (family == Family::baseline) {
        if (cfg.mode == Mode::discrete) {
            if (!cfg.tie_embedding_head) total += d * cfg.vocab_size;
        } else {
            total += d * cfg.feature_dim;
        }
    } else {
        total += d;  // energy head
        if (cfg.mode == Mode::discrete && !cfg.tie_embedding_head) {
            total += d * cfg.vocab_size;
        }
        total += mcmc.alpha_per_step ? mcmc.steps : 1;
        if (mcmc.noise_learnable) total += 1;
    }
    return total;
}

// ---------------------------------------------------------------------------
// baseline autoregressive model
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> embed_context(const SequenceBatch<S>& batch, ModelWeights<S>& w) {
    if (batch.mode != w.cfg.mode) {
        throw ConfigError("batch mode does not match model mode");
    }
    const int64_t T = batch.context;
    if (T > w.cfg.context_length) {
        throw ShapeError(strf("context overflow: %lld > %lld",
                              static_cast<long long>(T),
                              static_cast<long long>(w.cfg.context_length)));
    }
    if (w.cfg.mode == Mode::discrete) {
        const auto ids = batch.context_tokens();
        return reshape(gather_rows(w.p(w.embed), ids), {batch.batch, T, w.cfg.embed_dim});
    }
    return linear(batch.context_features(), w.p(w.embed));
}

template <class S>
Tensor<S> head_matrix(ModelWeights<S>& w) {
    if (w.cfg.mode == Mode::discrete && w.cfg.tie_embedding_head) {
        return transpose(w.p(w.embed), 0, 1);
    }
    return w.p(w.head);
}

// Next-state predictions in the output space: logits [B,T,V] for discrete,
// features [B,T,F] for continuous. Position i sees inputs <= i only.
template <class S>
Tensor<S> ar_forward(const SequenceBatch<S>& batch, ModelWeights<S>& w) {
    Tensor<S> x = embed_context(batch, w);
    const int64_t T = batch.context;
    std::vector<int64_t> positions(T);
    for (int64_t t = 0; t < T; ++t) positions[t] = t;
    for (const auto& bw : w.blocks) {
        x = block_forward(x, w, bw, positions);
    }
    x = rmsnorm_scaled(x, w.p(w.final_norm), w.cfg.rms_eps);
    return linear(x, head_matrix(w));
}

}  // namespace ebwm
