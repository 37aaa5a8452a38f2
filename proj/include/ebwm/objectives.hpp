#pragma once

#include <vector>

#include "ebwm/mcmc.hpp"

namespace ebwm {

// mean over elements of: 0.5 x^2 / beta for |x| < beta, else |x| - 0.5 beta.
template <class S>
Tensor<S> smooth_l1(const Tensor<S>& pred, const Tensor<S>& target, double beta) {
    require_same_shape(pred, target, "smooth-l1");
    if (!(beta > 0.0)) throw ConfigError("smooth_l1: beta must be > 0");
    Tensor<S> x = sub(pred, target);
    Tensor<S> ax = abs(x);
    // piecewise selector as a constant mask; the two branches agree in value
    // and slope at |x| = beta so either side of the boundary is fine
    Tensor<S> inside = detail::map_forward(ax, [beta](S v) {
        return static_cast<double>(v) < beta ? S(1) : S(0);
    });
    Tensor<S> quad = mul_scalar(mul(x, x), 0.5 / beta);
    Tensor<S> lin = add_scalar(ax, -0.5 * beta);
    Tensor<S> outside = add_scalar(neg(inside), 1.0);
    return mean_all(add(mul(quad, inside), mul(lin, outside)));
}

// numerically stable mean CE over rows of logits [N,V] against target ids
template <class S>
Tensor<S> cross_entropy_rows(const Tensor<S>& logits, const std::vector<int64_t>& targets) {
    if (logits.ndim() != 2 ||
        logits.shape()[0] != static_cast<int64_t>(targets.size())) {
        throw ShapeError(strf("cross-entropy: logits %s vs %zu targets",
                              logits.shape_string().c_str(), targets.size()));
    }
    const int64_t V = logits.shape()[1];
    Tensor<S> onehot = Tensor<S>::zeros(logits.shape());
    for (size_t r = 0; r < targets.size(); ++r) {
        if (targets[r] < 0 || targets[r] >= V) {
            throw ValueError(strf("cross-entropy: target id %lld outside [0,%lld)",
                                  static_cast<long long>(targets[r]),
                                  static_cast<long long>(V)));
        }
        onehot.data()[static_cast<int64_t>(r) * V + targets[r]] = S(1);
    }
    Tensor<S> mk = max_over_axis(logits, -1, true);
    Tensor<S> lse = add(log(sum(exp(sub(logits, mk)), -1, false)),
                        reshape(mk, {logits.shape()[0]}));
    Tensor<S> picked = sum(mul(logits, onehot), -1, false);
    return mean_all(sub(lse, picked));
}

template <class S>
Tensor<S> cross_entropy_logits(const Tensor<S>& logits3, const std::vector<int64_t>& targets) {
    const int64_t V = logits3.shape().back();
    return cross_entropy_rows(reshape(logits3, {logits3.numel() / V, V}), targets);
}

// mean CE of decoded candidates; exp of this is the reported perplexity
template <class S>
Tensor<S> cross_entropy_next_token(const Tensor<S>& candidate_final,
                                   const std::vector<int64_t>& targets, ModelWeights<S>& w) {
    return cross_entropy_logits(decode_candidate(candidate_final, w), targets);
}

// Representation-induced energy label: (1 - cos(z, z_hat)) / 2, the affine
// map sending cos = 1 -> 0 (compatible) and cos = -1 -> 1.
template <class S>
Tensor<S> energy_label(const Tensor<S>& z, const Tensor<S>& z_hat) {
    return mul_scalar(add_scalar(neg(cosine_similarity(z, z_hat)), 1.0), 0.5);
}

template <class S>
Tensor<S> energy_regression_loss(const Tensor<S>& predicted, const Tensor<S>& labels,
                                 EnergyDistance distance = EnergyDistance::squared) {
    require_same_shape(predicted, labels, "energy-regression-loss");
    Tensor<S> diff = sub(predicted, labels);
    if (distance == EnergyDistance::absolute) {
        return mean_all(abs(diff));
    }
    return mean_all(mul(diff, diff));
}

// mean of max(0, E - 1) + max(0, -E); zero exactly when all energies lie in [0,1]
template <class S>
Tensor<S> bounds_loss(const Tensor<S>& energies) {
    const double inf = std::numeric_limits<double>::infinity();
    Tensor<S> above = clamp(add_scalar(energies, -1.0), 0.0, inf);
    Tensor<S> below = clamp(neg(energies), 0.0, inf);
    return mean_all(add(above, below));
}

template <class S>
struct LossBreakdown {
    Tensor<S> total;
    double reconstruction = 0.0;
    double energy = 0.0;
    double bounds = 0.0;
};

namespace detail {

// per-position labels from the ground truth next state and a candidate, both
// in input space; candidates are treated as targets (detached)
template <class S>
Tensor<S> labels_for(const SequenceBatch<S>& batch, const Tensor<S>& candidate,
                     ModelWeights<S>& w) {
    NoGradScope<S> pause;
    Tensor<S> truth;
    if (w.cfg.mode == Mode::continuous) {
        truth = batch.target_features();
    } else {
        const auto ids = batch.target_tokens();
        truth = reshape(gather_rows(w.p(w.embed), ids),
                        {batch.batch, batch.context, w.cfg.embed_dim});
    }
    return energy_label(truth, candidate.detached()).detached();
}

}  // namespace detail

// reconstruction + energy-regression + out-of-bounds, weighted; the default
// coefficients (60, 0, 0) reduce to pure scaled reconstruction
template <class S>
LossBreakdown<S> total_loss(const SequenceBatch<S>& batch, const RefineResult<S>& refined,
                            ModelWeights<S>& w, const LossWeights& lw) {
    lw.validate();
    if (lw.reconstruction_coefficient == 0.0 && lw.energy_loss_coefficient == 0.0 &&
        lw.bounds_loss_coefficient == 0.0) {
        static bool warned = false;
        if (!warned) {
            std::fprintf(stderr, "warning: all loss coefficients are zero\n");
            warned = true;
        }
    }
    LossBreakdown<S> out;

    Tensor<S> recon;
    if (w.cfg.mode == Mode::continuous) {
        recon = smooth_l1(refined.candidate, batch.target_features(), 1.0);
    } else {
        recon = cross_entropy_next_token(refined.candidate, batch.target_tokens(), w);
    }
    out.reconstruction = static_cast<double>(recon.item());
    Tensor<S> total = mul_scalar(recon, lw.reconstruction_coefficient);

    if (lw.energy_loss_coefficient > 0.0 || lw.bounds_loss_coefficient > 0.0) {
        if (refined.step_energies.empty()) {
            throw ConfigError("total_loss: energy terms need a refinement trace");
        }
        std::vector<size_t> steps;
        if (lw.energy_labels_per_step) {
            for (size_t k = 0; k < refined.step_energies.size(); ++k) steps.push_back(k);
        } else {
            steps.push_back(refined.step_energies.size() - 1);
        }
        if (lw.energy_loss_coefficient > 0.0) {
            Tensor<S> acc;
            for (size_t idx = 0; idx < steps.size(); ++idx) {
                const size_t k = steps[idx];
                Tensor<S> labels = detail::labels_for(batch, refined.step_candidates[k], w);
                Tensor<S> term = energy_regression_loss(refined.step_energies[k], labels,
                                                        lw.energy_distance);
                acc = idx == 0 ? term : add(acc, term);
            }
            acc = mul_scalar(acc, 1.0 / static_cast<double>(steps.size()));
            out.energy = static_cast<double>(acc.item());
            total = add(total, mul_scalar(acc, lw.energy_loss_coefficient));
        }
        if (lw.bounds_loss_coefficient > 0.0) {
            Tensor<S> acc;
            for (size_t idx = 0; idx < steps.size(); ++idx) {
                Tensor<S> term = bounds_loss(refined.step_energies[steps[idx]]);
                acc = idx == 0 ? term : add(acc, term);
            }
            acc = mul_scalar(acc, 1.0 / static_cast<double>(steps.size()));
            out.bounds = static_cast<double>(acc.item());
            total = add(total, mul_scalar(acc, lw.bounds_loss_coefficient));
        }
    }
    out.total = total;
    return out;
}

}  // namespace ebwm
