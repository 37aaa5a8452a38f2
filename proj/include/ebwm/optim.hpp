#pragma once

#include <cmath>
#include <vector>

#include "ebwm/params.hpp"

namespace ebwm {

// lr = base_learning_rate * effective_batch_size / 256
inline double scaled_lr(double base_lr, double effective_batch_size) {
    if (!(base_lr > 0.0) || !(effective_batch_size > 0.0)) {
        throw ConfigError("scaled_lr: base_lr and batch size must be positive");
    }
    return base_lr * effective_batch_size / 256.0;
}

// Linear warmup from scaled/divider to scaled at warmup_steps, then cosine
// decay to scaled/min_scale at total_steps.
inline double lr_at_step(int64_t step, double scaled, int64_t warmup_steps,
                         double warmup_divider, double min_lr_scale, int64_t total_steps) {
    if (step < 0 || step > total_steps) {
        throw ConfigError(strf("lr_at_step: step %lld outside [0,%lld]",
                               static_cast<long long>(step),
                               static_cast<long long>(total_steps)));
    }
    const double floor_lr = scaled / warmup_divider;
    if (step <= warmup_steps) {
        // convex blend so both endpoints are exact in floating point
        const double frac = static_cast<double>(step) / static_cast<double>(warmup_steps);
        return floor_lr * (1.0 - frac) + scaled * frac;
    }
    const double min_lr = scaled / min_lr_scale;
    if (step == total_steps) return min_lr;
    const double t = static_cast<double>(step - warmup_steps) /
                     static_cast<double>(total_steps - warmup_steps);
    constexpr double pi = 3.14159265358979323846;
    return min_lr + (scaled - min_lr) * 0.5 * (1.0 + std::cos(pi * t));
}

struct OptStepStats {
    double grad_norm = 0.0;    // global L2 before clipping
    double clip_scale = 1.0;   // applied rescale, 1 when under the bound
    double alpha_lr = 0.0;     // effective lr of the step-size group this step
    bool aborted = false;      // non-finite gradients: parameters untouched
};

struct OptSettings {
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double alpha_lr_multiplier = 1.0;
    bool alpha_learnable = true;  // frozen step size drops out of the update
};

// Decoupled-weight-decay adaptive-moment optimizer with global-norm clipping.
// The step-size parameter group trains at lr * alpha_lr_multiplier and never
// decays. Moments are kept in double regardless of the parameter dtype.
template <class S>
class AdamW {
public:
    OptStepStats step(ParamStore<S>& params, const std::vector<Tensor<S>>& grads,
                      double lr, const OptSettings& s) {
        if (grads.size() != params.size()) {
            throw ShapeError(strf("optimizer: %zu gradients for %zu parameters",
                                  grads.size(), params.size()));
        }
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(static_cast<size_t>(params[static_cast<int64_t>(i)].numel()), 0.0);
                v_[i].assign(static_cast<size_t>(params[static_cast<int64_t>(i)].numel()), 0.0);
            }
        }

        OptStepStats stats;
        stats.alpha_lr = lr * s.alpha_lr_multiplier;

        double norm_sq = 0.0;
        bool finite = true;
        for (size_t i = 0; i < params.size(); ++i) {
            if (skip_param(params.param(i), s)) continue;
            const Tensor<S>& g = grads[i];
            for (int64_t j = 0; j < g.numel(); ++j) {
                const double v = static_cast<double>(g.data()[j]);
                if (!std::isfinite(v)) finite = false;
                norm_sq += v * v;
            }
        }
        stats.grad_norm = std::sqrt(norm_sq);
        if (!finite || !std::isfinite(stats.grad_norm)) {
            stats.aborted = true;
            std::fprintf(stderr, "optimizer: non-finite gradient, step aborted\n");
            return stats;
        }
        stats.clip_scale = stats.grad_norm > s.grad_clip ? s.grad_clip / stats.grad_norm : 1.0;

        ++t_;
        const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(t_));

        for (size_t i = 0; i < params.size(); ++i) {
            Param<S>& p = params.param(i);
            if (skip_param(p, s)) continue;
            const double lr_eff = p.flags.alpha_group ? stats.alpha_lr : lr;
            const double wd = (p.flags.no_decay || p.flags.alpha_group) ? 0.0 : s.weight_decay;
            S* w = p.value.data();
            const S* g = grads[i].data();
            double* m = m_[i].data();
            double* v = v_[i].data();
            for (int64_t j = 0; j < p.value.numel(); ++j) {
                const double gj = static_cast<double>(g[j]) * stats.clip_scale;
                if (wd != 0.0) {
                    w[j] = static_cast<S>(static_cast<double>(w[j]) * (1.0 - lr_eff * wd));
                }
                m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * gj;
                v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * gj * gj;
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                w[j] = static_cast<S>(static_cast<double>(w[j]) -
                                      lr_eff * mhat / (std::sqrt(vhat) + s.eps));
            }
        }
        return stats;
    }

    int64_t steps_taken() const { return t_; }

private:
    template <class P>
    static bool skip_param(const P& p, const OptSettings& s) {
        return p.flags.alpha_group && !s.alpha_learnable;
    }

    std::vector<std::vector<double>> m_, v_;
    int64_t t_ = 0;
};

}  // namespace ebwm
