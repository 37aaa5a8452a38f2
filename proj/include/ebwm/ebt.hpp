#pragma once

#include <utility>
#include <vector>

#include "ebwm/nn.hpp"

namespace ebwm {

// ---------------------------------------------------------------------------
// Energy-Based Transformer: dual streams. z_o carries the observed states and
// updates exactly like the baseline stack; z_p row i carries the candidate
// prediction for position i+1 and attends to observed rows <= i plus itself.
//
// The scores matrix per head is T x (T+1): column j <= i holds the scaled dot
// of the prediction query with observed key j, and the superdiagonal (i, i+1)
// holds the candidate's self-score sum(Q_p * K_p) over the head dim. Rows
// softmax over exactly those entries; everything else is exactly zero.
// ---------------------------------------------------------------------------

template <class S>
struct EnergyOutput {
    Tensor<S> energies;  // [B,T], one scalar per prediction row
    Tensor<S> total;     // scalar sum over batch and positions
};

namespace detail {

// mask builders for the T x (T+1) scores layout
template <class S>
Tensor<S> context_columns_mask(int64_t T) {  // 1 at (i, j) for j <= i
    Tensor<S> m = Tensor<S>::zeros({T, T + 1});
    for (int64_t i = 0; i < T; ++i) {
        for (int64_t j = 0; j <= i; ++j) m.data()[i * (T + 1) + j] = S(1);
    }
    return m;
}

template <class S>
Tensor<S> superdiagonal_mask(int64_t T) {  // 1 at (i, i+1)
    Tensor<S> m = Tensor<S>::zeros({T, T + 1});
    for (int64_t i = 0; i < T; ++i) m.data()[i * (T + 1) + i + 1] = S(1);
    return m;
}

template <class S>
Tensor<S> allowed_mask(int64_t T) {  // context plus superdiagonal
    Tensor<S> m = context_columns_mask<S>(T);
    for (int64_t i = 0; i < T; ++i) m.data()[i * (T + 1) + i + 1] = S(1);
    return m;
}

}  // namespace detail

// Observed-side tensors the prediction stream consumes in one block. The
// observed stream never reads candidates, so these are fixed across all
// refinement steps of a batch and are cached once per refinement call.
template <class S>
struct PStreamCache {
    Tensor<S> k_o, v_o;  // [B,H,T,dh], post-rotary keys and values of rms(z_o)
};

// Prediction-stream attention given the cached observed keys/values: builds
// the T x (T+1) scores matrix, softmaxes over allowed entries, recombines
// V_o mass with the extracted superdiagonal times V_p, projects through W_O.
template <class S>
Tensor<S> ebt_attention_p(const Tensor<S>& n_p, const PStreamCache<S>& cache,
                          ModelWeights<S>& w, const BlockWeights& bw,
                          const Tensor<S>& cos_p, const Tensor<S>& sin_p) {
    const int64_t B = n_p.shape()[0], T = n_p.shape()[1];
    const int64_t H = w.cfg.heads, dh = w.cfg.head_dim();
    const int64_t pq = bw.wq_p >= 0 ? bw.wq_p : bw.wq;
    const int64_t pk = bw.wk_p >= 0 ? bw.wk_p : bw.wk;
    const int64_t pv = bw.wv_p >= 0 ? bw.wv_p : bw.wv;
    Tensor<S> q_p = apply_rotary(split_heads(linear(n_p, w.p(pq)), H), cos_p, sin_p);
    Tensor<S> k_p = apply_rotary(split_heads(linear(n_p, w.p(pk)), H), cos_p, sin_p);
    Tensor<S> v_p = split_heads(linear(n_p, w.p(pv)), H);

    // prediction-to-observed scores, then the appended column for the
    // per-row self-score
    Tensor<S> to_observed = scaled_scores(q_p, cache.k_o);         // [B,H,T,T]
    Tensor<S> self_scores = sum(mul(q_p, k_p), -1, false);         // [B,H,T]
    if (w.cfg.scale_self_score) {
        self_scores = mul_scalar(self_scores, 1.0 / std::sqrt(static_cast<double>(dh)));
    }

    Tensor<S> ctx_mask = detail::context_columns_mask<S>(T);
    Tensor<S> diag_mask = detail::superdiagonal_mask<S>(T);
    Tensor<S> scores_wide = concat<S>({to_observed, Tensor<S>::zeros({B, H, T, 1})}, -1);
    Tensor<S> self_wide = mul(mul(ones<S>({B, H, T, T + 1}), reshape(self_scores, {B, H, T, 1})),
                              diag_mask);
    Tensor<S> scores = add(mul(scores_wide, ctx_mask), self_wide);

    Tensor<S> probs = masked_softmax(scores, detail::allowed_mask<S>(T));  // [B,H,T,T+1]

    // split the row mass: observed columns feed V_o, the extracted
    // superdiagonal weights each candidate's own V_p row
    Tensor<S> self_probs = sum(mul(probs, diag_mask), -1, false);          // [B,H,T]
    Tensor<S> ctx_probs = slice(mul(probs, ctx_mask), -1, 0, T);           // [B,H,T,T]
    Tensor<S> z_ctx = batched_matmul(ctx_probs, cache.v_o);
    Tensor<S> z_self = mul(v_p, reshape(self_probs, {B, H, T, 1}));
    Tensor<S> merged = merge_heads(add(z_ctx, z_self));
    return reshape(matmul(reshape(merged, {B * T, H * dh}), w.p(bw.wo)), {B, T, H * dh});
}

// Attention sublayer over both streams. z_o_out is standard causal attention
// and never reads z_p. Projections are shared between the streams unless the
// model was built with separate prediction projections.
template <class S>
std::pair<Tensor<S>, Tensor<S>> ebt_attention(const Tensor<S>& z_o, const Tensor<S>& z_p,
                                              ModelWeights<S>& w, const BlockWeights& bw,
                                              const std::vector<int64_t>& positions_o,
                                              const std::vector<int64_t>& positions_p) {
    require_same_shape(z_o, z_p, "ebt-attention");
    const int64_t T = z_o.shape()[1];
    const int64_t H = w.cfg.heads, dh = w.cfg.head_dim();

    auto [cos_o, sin_o] = rotary_tables<S>(positions_o, dh);
    auto [cos_p, sin_p] = rotary_tables<S>(positions_p, dh);

    // observed stream, identical op sequence to the baseline attention
    Tensor<S> q_o = apply_rotary(split_heads(linear(z_o, w.p(bw.wq)), H), cos_o, sin_o);
    PStreamCache<S> cache;
    cache.k_o = apply_rotary(split_heads(linear(z_o, w.p(bw.wk)), H), cos_o, sin_o);
    cache.v_o = split_heads(linear(z_o, w.p(bw.wv)), H);
    Tensor<S> out_o = attention_with_mask(q_o, cache.k_o, cache.v_o, causal_mask<S>(T),
                                          w.p(bw.wo));
    Tensor<S> out_p = ebt_attention_p(z_p, cache, w, bw, cos_p, sin_p);
    return {out_o, out_p};
}

// Pre-norm residual wrapper over both streams; the feedforward is shared.
template <class S>
std::pair<Tensor<S>, Tensor<S>> ebt_block(const Tensor<S>& z_o, const Tensor<S>& z_p,
                                          ModelWeights<S>& w, const BlockWeights& bw,
                                          const std::vector<int64_t>& positions_o,
                                          const std::vector<int64_t>& positions_p) {
    Tensor<S> n_o = rmsnorm_scaled(z_o, w.p(bw.attn_norm), w.cfg.rms_eps);
    Tensor<S> n_p = rmsnorm_scaled(z_p, w.p(bw.attn_norm), w.cfg.rms_eps);
    auto [a_o, a_p] = ebt_attention(n_o, n_p, w, bw, positions_o, positions_p);
    Tensor<S> h_o = add(z_o, a_o);
    Tensor<S> h_p = add(z_p, a_p);
    Tensor<S> f_o = add(h_o, gated_ff(rmsnorm_scaled(h_o, w.p(bw.ff_norm), w.cfg.rms_eps), w, bw));
    Tensor<S> f_p = add(h_p, gated_ff(rmsnorm_scaled(h_p, w.p(bw.ff_norm), w.cfg.rms_eps), w, bw));
    return {f_o, f_p};
}

// Candidates live in the input space: raw features in continuous mode (mapped
// through the shared input projection), embedding-space vectors in discrete
// mode.
template <class S>
Tensor<S> embed_candidate(const Tensor<S>& candidate, ModelWeights<S>& w) {
    if (w.cfg.mode == Mode::continuous) {
        if (candidate.shape().back() != w.cfg.feature_dim) {
            throw ShapeError(strf("candidate feature dim %lld != %lld",
                                  static_cast<long long>(candidate.shape().back()),
                                  static_cast<long long>(w.cfg.feature_dim)));
        }
        return linear(candidate, w.p(w.embed));
    }
    if (candidate.shape().back() != w.cfg.embed_dim) {
        throw ShapeError(strf("candidate embed dim %lld != %lld",
                              static_cast<long long>(candidate.shape().back()),
                              static_cast<long long>(w.cfg.embed_dim)));
    }
    return candidate;
}

// Everything the candidate scoring needs that does not depend on the
// candidate itself: per-block observed keys/values and the prediction-stream
// rotary tables. Computed once per batch and reused across refinement steps.
template <class S>
struct EnergyPlan {
    std::vector<PStreamCache<S>> blocks;
    Tensor<S> cos_p, sin_p;
};

template <class S>
EnergyPlan<S> plan_energy(const SequenceBatch<S>& batch, ModelWeights<S>& w) {
    if (w.family != Family::ebwm) {
        throw ConfigError("energy_forward: weights are not an energy model");
    }
    const int64_t T = batch.context;
    Tensor<S> z_o = embed_context(batch, w);
    std::vector<int64_t> pos_o(T), pos_p(T);
    for (int64_t t = 0; t < T; ++t) {
        pos_o[t] = t;
        pos_p[t] = t + 1;  // the position each candidate stands in for
    }
    const int64_t H = w.cfg.heads, dh = w.cfg.head_dim();
    auto [cos_o, sin_o] = rotary_tables<S>(pos_o, dh);
    EnergyPlan<S> plan;
    std::tie(plan.cos_p, plan.sin_p) = rotary_tables<S>(pos_p, dh);
    Tensor<S> mask = causal_mask<S>(T);
    for (const auto& bw : w.blocks) {
        Tensor<S> n_o = rmsnorm_scaled(z_o, w.p(bw.attn_norm), w.cfg.rms_eps);
        Tensor<S> q_o = apply_rotary(split_heads(linear(n_o, w.p(bw.wq)), H), cos_o, sin_o);
        PStreamCache<S> cache;
        cache.k_o = apply_rotary(split_heads(linear(n_o, w.p(bw.wk)), H), cos_o, sin_o);
        cache.v_o = split_heads(linear(n_o, w.p(bw.wv)), H);
        Tensor<S> h = add(z_o, attention_with_mask(q_o, cache.k_o, cache.v_o, mask,
                                                   w.p(bw.wo)));
        z_o = add(h, gated_ff(rmsnorm_scaled(h, w.p(bw.ff_norm), w.cfg.rms_eps), w, bw));
        plan.blocks.push_back(std::move(cache));
    }
    return plan;
}

template <class S>
EnergyOutput<S> energy_forward_planned(const EnergyPlan<S>& plan,
                                       const SequenceBatch<S>& batch,
                                       const Tensor<S>& candidate, ModelWeights<S>& w) {
    if (!candidate.all_finite()) {
        throw ValueError("energy_forward: non-finite candidate");
    }
    const int64_t T = batch.context;
    if (T > w.cfg.context_length) {
        throw ShapeError(strf("energy_forward: context overflow %lld > %lld",
                              static_cast<long long>(T),
                              static_cast<long long>(w.cfg.context_length)));
    }
    if (candidate.ndim() != 3 || candidate.shape()[0] != batch.batch ||
        candidate.shape()[1] != T) {
        throw ShapeError(strf("energy_forward: candidate %s does not match batch [B=%lld,T=%lld]",
                              candidate.shape_string().c_str(),
                              static_cast<long long>(batch.batch),
                              static_cast<long long>(T)));
    }
    Tensor<S> z_p = embed_candidate(candidate, w);
    for (size_t l = 0; l < w.blocks.size(); ++l) {
        const BlockWeights& bw = w.blocks[l];
        Tensor<S> n_p = rmsnorm_scaled(z_p, w.p(bw.attn_norm), w.cfg.rms_eps);
        Tensor<S> a_p = ebt_attention_p(n_p, plan.blocks[l], w, bw, plan.cos_p, plan.sin_p);
        Tensor<S> h_p = add(z_p, a_p);
        z_p = add(h_p, gated_ff(rmsnorm_scaled(h_p, w.p(bw.ff_norm), w.cfg.rms_eps), w, bw));
    }
    Tensor<S> hp = rmsnorm_scaled(z_p, w.p(w.final_norm), w.cfg.rms_eps);
    const int64_t B = batch.batch, d = w.cfg.embed_dim;
    Tensor<S> en = reshape(matmul(reshape(hp, {B * T, d}), w.p(w.energy_head)), {B, T});
    EnergyOutput<S> out;
    out.energies = en;
    out.total = sum_all(en);
    return out;
}

// Scores how compatible the context and the candidate predictions are; the
// per-position energies depend on observed rows <= i and candidate row i only.
template <class S>
EnergyOutput<S> energy_forward(const SequenceBatch<S>& batch, const Tensor<S>& candidate,
                               ModelWeights<S>& w) {
    EnergyPlan<S> plan = plan_energy(batch, w);
    return energy_forward_planned(plan, batch, candidate, w);
}

// Refined candidate embedding -> vocabulary logits (discrete mode only).
template <class S>
Tensor<S> decode_candidate(const Tensor<S>& candidate, ModelWeights<S>& w) {
    if (w.cfg.mode != Mode::discrete) {
        throw ConfigError("decode_candidate: continuous mode has no decoder");
    }
    Tensor<S> dec = w.cfg.tie_embedding_head ? transpose(w.p(w.embed), 0, 1) : w.p(w.head);
    if (candidate.ndim() == 1) {
        return reshape(matmul(reshape(candidate, {1, candidate.numel()}), dec),
                       {w.cfg.vocab_size});
    }
    return linear(candidate, dec);
}

// Stack the observed rows 0..i and the candidate row i, run plain causal
// attention, and read the last row: the reference the batched ebt_attention
// must reproduce row by row.
template <class S>
Tensor<S> ebt_attention_row_oracle(const Tensor<S>& z_o, const Tensor<S>& z_p, int64_t b,
                                   int64_t row, ModelWeights<S>& w, const BlockWeights& bw) {
    const int64_t T = z_o.shape()[1], d = z_o.shape()[2];
    std::vector<S> seq;
    for (int64_t j = 0; j <= row; ++j) {
        const S* src = z_o.data() + (b * T + j) * d;
        seq.insert(seq.end(), src, src + d);
    }
    const S* cand = z_p.data() + (b * T + row) * d;
    seq.insert(seq.end(), cand, cand + d);
    Tensor<S> stacked = Tensor<S>::from({1, row + 2, d}, std::move(seq));
    std::vector<int64_t> positions(row + 2);
    for (int64_t t = 0; t <= row; ++t) positions[t] = t;
    positions[row + 1] = row + 1;
    Tensor<S> out = causal_attention(stacked, w, bw, positions);
    return slice(reshape(out, {row + 2, d}), 0, row + 1, 1);
}

}  // namespace ebwm
