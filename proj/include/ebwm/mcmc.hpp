#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "ebwm/ebt.hpp"

namespace ebwm {

template <class S>
using EnergyFn = std::function<EnergyOutput<S>(const Tensor<S>& candidate)>;

template <class S>
struct TraceStep {
    Tensor<S> candidate;  // state at the start of the step, detached
    Tensor<S> energies;   // [B,T] at that candidate, detached
    double alpha = 0.0;   // step size applied
    double grad_l2 = 0.0;
    double grad_max_abs = 0.0;  // post-clamp, so <= clamp bound when clamping
};

template <class S>
struct RefinementTrace {
    std::vector<TraceStep<S>> steps;
    std::optional<int64_t> converged_at;

    double mean_energy(size_t step) const {
        const auto& e = steps.at(step).energies;
        double acc = 0.0;
        for (int64_t i = 0; i < e.numel(); ++i) acc += static_cast<double>(e.data()[i]);
        return acc / static_cast<double>(e.numel());
    }
    double first_mean_energy() const { return mean_energy(0); }
    double last_mean_energy() const { return mean_energy(steps.size() - 1); }
};

template <class S>
struct RefineResult {
    Tensor<S> candidate;  // final; taped when the refinement ran with create_graph
    RefinementTrace<S> trace;
    // taped per-step energies (aligned with trace.steps) kept alive for losses
    // that read energies through the training graph
    std::vector<Tensor<S>> step_energies;
    std::vector<Tensor<S>> step_candidates;  // taped, aligned with steps
};

// ---------------------------------------------------------------------------
// candidate initialization (the MCMC condition)
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> init_candidate(InitStrategy strategy, const SequenceBatch<S>& batch,
                         ModelWeights<S>& w, double init_noise_scale, uint64_t seed) {
    NoGradScope<S> pause;  // the condition is a constant, not part of the graph
    const int64_t B = batch.batch, T = batch.context;
    const int64_t din = w.cfg.input_dim();
    switch (strategy) {
        case InitStrategy::zeros:
            return Tensor<S>::zeros({B, T, din});
        case InitStrategy::random_noise: {
            Rng rng(seed);
            return Tensor<S>::randn({B, T, din}, rng, init_noise_scale);
        }
        case InitStrategy::copy_most_recent: {
            if (w.cfg.mode == Mode::continuous) {
                return batch.context_features().clone().detached();
            }
            const auto ids = batch.context_tokens();
            Tensor<S> emb = gather_rows(w.p(w.embed), ids);
            return reshape(emb, {B, T, din}).clone().detached();
        }
    }
    throw ConfigError("init_candidate: invalid strategy");
}

// ---------------------------------------------------------------------------
// refinement
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void grad_norms(const Tensor<S>& g, double& l2, double& max_abs) {
    double acc = 0.0, m = 0.0;
    for (int64_t i = 0; i < g.numel(); ++i) {
        const double v = static_cast<double>(g.data()[i]);
        acc += v * v;
        m = std::max(m, std::abs(v));
    }
    l2 = std::sqrt(acc);
    max_abs = m;
}

// step size as a taped tensor (learnable path) or a plain constant
template <class S>
Tensor<S> alpha_for_step(ModelWeights<S>& w, int64_t step) {
    const MCMCConfig& cfg = w.mcmc;
    Tensor<S>& raw = w.p(w.alpha_raw);
    Tensor<S> entry = cfg.alpha_per_step
                          ? slice(raw, 0, std::min<int64_t>(step, raw.numel() - 1), 1)
                          : raw;
    if (cfg.alpha_learnable) {
        return softplus(entry);
    }
    return Tensor<S>::scalar(entry.data()[0]);
}

template <class S>
Tensor<S> sigma_tensor(ModelWeights<S>& w) {
    const MCMCConfig& cfg = w.mcmc;
    if (cfg.noise_learnable && w.sigma_raw >= 0) {
        return softplus(w.p(w.sigma_raw));
    }
    return Tensor<S>::scalar(static_cast<S>(cfg.noise_scale));
}

}  // namespace detail

// Gradient descent on the energy with respect to the candidate. Training
// (create_graph) keeps every inner gradient differentiable so a downstream
// reconstruction loss reaches the weights and the step size through the whole
// chain; the chain then runs exactly cfg.steps steps. Inference may run to an
// energy cutoff under cfg.max_steps, each step on its own throwaway tape.
template <class S>
RefineResult<S> refine_with_energy(const EnergyFn<S>& energy, Tensor<S> candidate,
                                   ModelWeights<S>& w, bool create_graph, uint64_t seed) {
    const MCMCConfig& cfg = w.mcmc;
    cfg.validate();
    if (!candidate.all_finite()) {
        throw ValueError("refine: non-finite initial candidate");
    }
    Rng noise_rng(seed ^ 0x9e3779b97f4a7c15ULL);

    RefineResult<S> result;
    Tape<S>* outer = Tape<S>::active();
    if (create_graph) {
        if (!outer) throw ValueError("refine: create_graph needs an active tape");
        outer->watch(candidate);
    }

    const bool use_cutoff = !create_graph && cfg.energy_cutoff.has_value();
    const int64_t budget = use_cutoff ? *cfg.max_steps : cfg.steps;

    for (int64_t k = 0; k < budget; ++k) {
        std::optional<Tape<S>> local;
        std::optional<TapeScope<S>> local_scope;
        Tensor<S> cand_in = candidate;
        if (!create_graph) {
            local.emplace();
            local_scope.emplace(*local);
            local->watch(cand_in);
        }

        EnergyOutput<S> e = energy(cand_in);
        if (!e.energies.all_finite()) {
            throw ValueError(strf("refine: non-finite energy at step %lld",
                                  static_cast<long long>(k)));
        }

        TraceStep<S> entry;
        entry.candidate = cand_in.detached();
        entry.energies = e.energies.detached();
        result.step_energies.push_back(e.energies);
        result.step_candidates.push_back(cand_in);

        if (use_cutoff) {
            double mean = 0.0;
            for (int64_t i = 0; i < e.energies.numel(); ++i) {
                mean += static_cast<double>(e.energies.data()[i]);
            }
            mean /= static_cast<double>(e.energies.numel());
            if (mean <= *cfg.energy_cutoff) {
                result.trace.steps.push_back(std::move(entry));
                result.trace.converged_at = k;
                break;
            }
        }

        Tape<S>* tape = create_graph ? outer : &*local;
        Tensor<S> g = tape->grad(e.total, {cand_in}, create_graph)[0];
        if (!g.all_finite()) {
            throw ValueError(strf("refine: non-finite gradient at step %lld",
                                  static_cast<long long>(k)));
        }
        if (cfg.truncated) {
            g = g.detached();
        }
        if (cfg.clamp_enabled) {
            g = clamp(g, -cfg.clamp_bound, cfg.clamp_bound);
        }
        detail::grad_norms(g, entry.grad_l2, entry.grad_max_abs);

        Tensor<S> alpha = detail::alpha_for_step(w, k);
        entry.alpha = static_cast<double>(alpha.data()[0]);
        Tensor<S> update = mul(g, alpha);

        Tensor<S> next = create_graph ? sub(candidate, update)
                                      : sub(cand_in.detached(), update);
        if (cfg.noise_scale > 0.0 || (cfg.noise_learnable && w.sigma_raw >= 0)) {
            Tensor<S> xi = Tensor<S>::randn(next.shape(), noise_rng);
            next = add(next, mul(xi, detail::sigma_tensor(w)));
        }
        candidate = create_graph ? next : next.detached();
        result.trace.steps.push_back(std::move(entry));
    }

    result.candidate = candidate;
    return result;
}

// The model-bound form: refine candidate predictions against the energy
// transformer for this batch's context. The observed stream is planned once
// and shared by all refinement steps; during training the plan is taped so
// weight gradients flow through it.
template <class S>
RefineResult<S> refine(const SequenceBatch<S>& batch, Tensor<S> candidate0,
                       ModelWeights<S>& w, bool create_graph, uint64_t seed) {
    std::optional<EnergyPlan<S>> plan;
    if (create_graph) {
        plan.emplace(plan_energy(batch, w));
    } else {
        NoGradScope<S> pause;
        plan.emplace(plan_energy(batch, w));
    }
    EnergyFn<S> energy = [&batch, &w, plan = std::move(*plan)](const Tensor<S>& cand) {
        return energy_forward_planned(plan, batch, cand, w);
    };
    return refine_with_energy<S>(energy, std::move(candidate0), w, create_graph, seed);
}

// Newline-delimited JSON records (step, mean-energy, grad-norm, alpha) for
// plotting refinement behaviour.
template <class S>
void export_trace(const RefinementTrace<S>& trace, std::ostream& os) {
    for (size_t k = 0; k < trace.steps.size(); ++k) {
        const auto& s = trace.steps[k];
        double mean = 0.0;
        for (int64_t i = 0; i < s.energies.numel(); ++i) {
            mean += static_cast<double>(s.energies.data()[i]);
        }
        mean /= static_cast<double>(s.energies.numel());
        os << strf("{\"step\":%zu,\"mean_energy\":%.9g,\"grad_norm\":%.9g,\"alpha\":%.9g}\n",
                   k, mean, s.grad_l2, s.alpha);
    }
    if (trace.converged_at.has_value()) {
        os << strf("{\"converged_at\":%lld}\n",
                   static_cast<long long>(*trace.converged_at));
    }
}

}  // namespace ebwm
