#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "ebwm/common.hpp"

namespace ebwm {

using Json = nlohmann::json;

enum class Mode { discrete, continuous };
enum class Family { baseline, ebwm };
enum class InitStrategy { random_noise, zeros, copy_most_recent };

inline std::string to_string(Mode m) {
    return m == Mode::discrete ? "discrete" : "continuous";
}
inline std::string to_string(Family f) {
    return f == Family::baseline ? "baseline" : "ebwm";
}
inline std::string to_string(InitStrategy s) {
    switch (s) {
        case InitStrategy::random_noise: return "random-noise";
        case InitStrategy::zeros: return "zeros";
        case InitStrategy::copy_most_recent: return "copy-most-recent";
    }
    return "?";
}

inline InitStrategy init_strategy_from(const std::string& s) {
    if (s == "random-noise") return InitStrategy::random_noise;
    if (s == "zeros") return InitStrategy::zeros;
    if (s == "copy-most-recent") return InitStrategy::copy_most_recent;
    throw ConfigError("mcmc.init_strategy: unknown strategy '" + s + "'");
}

struct ModelConfig {
    Mode mode = Mode::continuous;
    int64_t embed_dim = 64;
    int64_t heads = 4;
    int64_t blocks = 2;
    int64_t context_length = 16;
    int64_t vocab_size = 0;    // discrete mode
    int64_t feature_dim = 0;   // continuous mode
    bool tie_embedding_head = false;
    bool separate_prediction_projections = false;
    bool scale_self_score = true;  // 1/sqrt(d_k) on the prediction self-score
    double init_std = 0.02;
    double rms_eps = 1e-6;

    int64_t head_dim() const { return embed_dim / heads; }
    int64_t ff_hidden() const {
        return static_cast<int64_t>(std::llround(8.0 * static_cast<double>(embed_dim) / 3.0));
    }
    int64_t input_dim() const {
        // the space candidates live in: raw features, or embeddings for tokens
        return mode == Mode::continuous ? feature_dim : embed_dim;
    }

    void validate() const {
        if (embed_dim <= 0 || heads <= 0 || blocks <= 0 || context_length <= 0) {
            throw ConfigError("model: dimensions must be positive");
        }
        if (embed_dim % heads != 0) {
            throw ConfigError(strf("model.embed_dim: %lld not divisible by %lld heads",
                                   static_cast<long long>(embed_dim),
                                   static_cast<long long>(heads)));
        }
        if (head_dim() % 2 != 0) {
            throw ConfigError("model: head dim must be even for rotary positions");
        }
        if (mode == Mode::discrete && (vocab_size <= 0 || feature_dim != 0)) {
            throw ConfigError("model.vocab_size: discrete mode needs vocab_size and no feature_dim");
        }
        if (mode == Mode::continuous && (feature_dim <= 0 || vocab_size != 0)) {
            throw ConfigError("model.feature_dim: continuous mode needs feature_dim and no vocab_size");
        }
    }
};

struct MCMCConfig {
    int64_t steps = 4;  // K, refinement steps during training
    double alpha_init = 3e4;
    bool alpha_learnable = true;
    bool alpha_per_step = false;  // one scalar shared across steps by default
    double alpha_lr_multiplier = 2e5;
    bool clamp_enabled = true;
    double clamp_bound = 1.0;  // elementwise bound on the candidate gradient
    double noise_scale = 0.0;  // Langevin sigma, 0 disables
    bool noise_learnable = false;
    InitStrategy init_strategy = InitStrategy::random_noise;
    double init_noise_scale = 1.0;
    std::optional<double> energy_cutoff;  // inference-only early stop
    std::optional<int64_t> max_steps;     // inference cap when cutoff is set
    bool truncated = false;  // detach the inner gradient (first-order training)

    void validate() const {
        if (steps < 1) throw ConfigError("mcmc.steps: need at least one step");
        // alpha_init = 0 is allowed only for the non-learnable parameterization:
        // the learnable one goes through softplus, which cannot represent 0.
        if (alpha_learnable ? !(alpha_init > 0.0) : !(alpha_init >= 0.0)) {
            throw ConfigError("mcmc.alpha_init: must be > 0 (>= 0 if non-learnable)");
        }
        if (noise_scale < 0.0) throw ConfigError("mcmc.noise_scale: must be >= 0");
        if (clamp_enabled && !(clamp_bound > 0.0)) {
            throw ConfigError("mcmc.clamp_bound: must be > 0 when clamping");
        }
        if (energy_cutoff.has_value() && !max_steps.has_value()) {
            throw ConfigError("mcmc.energy_cutoff: set without mcmc.max_steps");
        }
        if (max_steps.has_value() && *max_steps < steps) {
            throw ConfigError("mcmc.max_steps: must be >= mcmc.steps");
        }
    }
};

enum class EnergyDistance { squared, absolute };

struct LossWeights {
    double reconstruction_coefficient = 60.0;
    double energy_loss_coefficient = 0.0;
    double bounds_loss_coefficient = 0.0;
    EnergyDistance energy_distance = EnergyDistance::squared;
    bool energy_labels_per_step = false;  // default: label the final step only

    void validate() const {
        if (reconstruction_coefficient < 0 || energy_loss_coefficient < 0 ||
            bounds_loss_coefficient < 0) {
            throw ConfigError("loss: coefficients must be >= 0");
        }
    }
};

enum class DataKind { ar1, bytes };

struct DataConfig {
    DataKind kind = DataKind::ar1;
    // ar1 (continuous embedding sequences)
    int64_t feature_dim = 16;
    double gamma = 0.9;            // temporal-consistency coefficient
    std::string mixing = "orthogonal";  // none | orthogonal
    // bytes (discrete)
    std::string corpus_path;       // raw bytes from a file
    int64_t synthetic_bytes = 0;   // >0: generate a corpus instead of reading one
    double val_fraction = 0.1;
    uint64_t seed = 33;

    void validate() const {
        if (kind == DataKind::ar1) {
            if (feature_dim <= 0) throw ConfigError("data.feature_dim: must be > 0");
            if (gamma < 0.0 || gamma > 1.0) {
                throw ConfigError("data.gamma: must lie in [0,1]");
            }
            if (mixing != "none" && mixing != "orthogonal") {
                throw ConfigError("data.mixing: expected 'none' or 'orthogonal'");
            }
        } else {
            if (corpus_path.empty() && synthetic_bytes <= 0) {
                throw ConfigError("data.corpus_path: byte mode needs a corpus file or data.synthetic_bytes");
            }
            if (val_fraction <= 0.0 || val_fraction >= 1.0) {
                throw ConfigError("data.val_fraction: must lie in (0,1)");
            }
        }
    }
};

struct TrainConfig {
    Family family = Family::ebwm;
    ModelConfig model;
    MCMCConfig mcmc;
    LossWeights loss;
    DataConfig data;

    double base_lr = 2e-4;
    int64_t effective_batch_size = 192;
    int64_t micro_batch_size = 0;  // 0: one micro-batch per step
    int64_t warmup_steps = 10000;
    double warmup_divider = 20.0;
    double min_lr_scale = 10.0;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int64_t max_steps = 1000;
    int64_t eval_interval = 100;
    int64_t eval_batches = 4;
    std::optional<double> stop_at_val_metric;  // stop once validation reaches this
    uint64_t seed = 33;
    bool wall_time_in_metrics = true;  // off for byte-identical metrics files

    std::string out_dir = "runs/default";
    std::string metrics_file = "metrics.csv";
    std::string checkpoint_file = "model.ckpt";

    int64_t micro_batch() const {
        return micro_batch_size > 0 ? micro_batch_size : effective_batch_size;
    }

    void validate() const {
        model.validate();
        mcmc.validate();
        loss.validate();
        data.validate();
        if (!(base_lr > 0)) throw ConfigError("base_lr: must be > 0");
        if (warmup_steps < 1) throw ConfigError("warmup_steps: must be >= 1");
        if (!(grad_clip > 0)) throw ConfigError("grad_clip: must be > 0");
        if (effective_batch_size < 1) throw ConfigError("effective_batch_size: must be >= 1");
        if (micro_batch_size < 0) throw ConfigError("micro_batch_size: must be >= 0");
        if (micro_batch_size > 0 && effective_batch_size % micro_batch_size != 0) {
            throw ConfigError("micro_batch_size: must divide effective_batch_size");
        }
        if (warmup_divider < 1 || min_lr_scale < 1) {
            throw ConfigError("warmup_divider/min_lr_scale: must be >= 1");
        }
        if (max_steps < 1) throw ConfigError("max_steps: must be >= 1");
        if ((model.mode == Mode::continuous) != (data.kind == DataKind::ar1)) {
            throw ConfigError("data.kind: dataset kind does not match model mode");
        }
        if (model.mode == Mode::continuous && model.feature_dim != data.feature_dim) {
            throw ConfigError("data.feature_dim: does not match model.feature_dim");
        }
    }
};

// ---------------------------------------------------------------------------
// presets: Tables 3-5 values by name, plus CPU-sized desk configs
// ---------------------------------------------------------------------------

inline std::vector<std::string> preset_names() {
    return {"cv-paper-ebwm",      "cv-paper-baseline", "nlp-paper-ebwm",
            "nlp-paper-baseline", "desk-continuous-ebwm", "desk-continuous-baseline",
            "desk-discrete-ebwm", "desk-discrete-baseline", "smoke"};
}

inline TrainConfig preset_config(const std::string& name) {
    TrainConfig c;
    auto paper_common = [&] {
        c.warmup_steps = 10000;
        c.warmup_divider = 20.0;
        c.min_lr_scale = 10.0;
        c.weight_decay = 0.01;
        c.grad_clip = 1.0;
        c.beta1 = 0.9;
        c.beta2 = 0.999;
        c.seed = 33;
        c.model.embed_dim = 768;
        c.model.heads = 12;
        c.model.blocks = 12;
        c.loss.reconstruction_coefficient = 60.0;
        c.loss.energy_loss_coefficient = 0.0;
        c.loss.bounds_loss_coefficient = 0.0;
    };
    auto cv_model = [&] {
        c.model.mode = Mode::continuous;
        c.model.context_length = 16;
        c.model.feature_dim = 768;  // frozen-encoder feature width
        c.data.kind = DataKind::ar1;
        c.data.feature_dim = 768;
    };
    auto nlp_model = [&] {
        c.model.mode = Mode::discrete;
        c.model.context_length = 256;
        c.model.vocab_size = 50277;
        c.model.feature_dim = 0;
        c.data.kind = DataKind::bytes;
        c.data.synthetic_bytes = 1 << 20;
    };

    if (name == "cv-paper-ebwm") {
        paper_common();
        cv_model();
        c.family = Family::ebwm;
        c.base_lr = 2e-4;
        c.effective_batch_size = 192;
        c.mcmc.steps = 4;
        c.mcmc.alpha_init = 3e4;
        c.mcmc.alpha_lr_multiplier = 2e5;
        c.mcmc.alpha_learnable = true;
        c.mcmc.clamp_enabled = true;
        c.mcmc.noise_scale = 0.0;
        return c;
    }
    if (name == "cv-paper-baseline") {
        paper_common();
        cv_model();
        c.family = Family::baseline;
        c.base_lr = 1e-3;
        c.effective_batch_size = 192;
        return c;
    }
    if (name == "nlp-paper-ebwm") {
        paper_common();
        nlp_model();
        c.family = Family::ebwm;
        c.base_lr = 2e-4;
        c.effective_batch_size = 72;
        c.mcmc.steps = 2;
        c.mcmc.alpha_init = 3e5;
        c.mcmc.alpha_lr_multiplier = 2e6;
        return c;
    }
    if (name == "nlp-paper-baseline") {
        paper_common();
        nlp_model();
        c.family = Family::baseline;
        c.base_lr = 6e-4;
        c.effective_batch_size = 384;
        return c;
    }

    // desk configs: CPU-trainable in minutes. Base learning rates look large
    // because the batch-size scaling rule divides by 256.
    auto desk_common = [&] {
        c.model.embed_dim = 64;
        c.model.heads = 4;
        c.model.blocks = 2;
        c.warmup_steps = 100;
        c.weight_decay = 0.01;
        c.grad_clip = 1.0;
        c.seed = 33;
        c.effective_batch_size = 16;
        c.eval_interval = 100;
        c.eval_batches = 4;
        c.max_steps = 3000;
        c.base_lr = 5e-2;
    };
    auto desk_continuous = [&] {
        c.model.mode = Mode::continuous;
        c.model.context_length = 16;
        c.model.feature_dim = 16;
        c.data.kind = DataKind::ar1;
        c.data.feature_dim = 16;
        c.data.gamma = 0.9;
    };
    auto desk_discrete = [&] {
        c.model.mode = Mode::discrete;
        c.model.context_length = 32;
        c.model.vocab_size = 256;
        c.data.kind = DataKind::bytes;
        c.data.synthetic_bytes = 1 << 20;
    };
    auto desk_mcmc = [&] {
        c.mcmc.alpha_init = 40.0;
        c.mcmc.alpha_lr_multiplier = 1e3;
        c.mcmc.alpha_learnable = true;
        c.mcmc.clamp_enabled = true;
        c.mcmc.clamp_bound = 1.0;
        c.mcmc.init_strategy = InitStrategy::random_noise;
    };

    if (name == "desk-continuous-ebwm") {
        desk_common();
        desk_continuous();
        desk_mcmc();
        c.family = Family::ebwm;
        c.effective_batch_size = 8;
        c.mcmc.steps = 4;
        return c;
    }
    if (name == "desk-continuous-baseline") {
        desk_common();
        desk_continuous();
        c.family = Family::baseline;
        return c;
    }
    if (name == "desk-discrete-ebwm") {
        desk_common();
        desk_discrete();
        desk_mcmc();
        c.family = Family::ebwm;
        c.effective_batch_size = 8;
        c.mcmc.steps = 2;
        c.mcmc.init_strategy = InitStrategy::copy_most_recent;
        return c;
    }
    if (name == "desk-discrete-baseline") {
        desk_common();
        desk_discrete();
        c.family = Family::baseline;
        return c;
    }
    if (name == "smoke") {
        desk_common();
        desk_continuous();
        desk_mcmc();
        c.family = Family::ebwm;
        c.model.embed_dim = 32;
        c.model.context_length = 8;
        c.model.feature_dim = 8;
        c.data.feature_dim = 8;
        c.mcmc.steps = 2;
        c.effective_batch_size = 4;
        c.warmup_steps = 20;
        c.max_steps = 60;
        c.eval_interval = 30;
        c.eval_batches = 2;
        c.wall_time_in_metrics = false;  // keeps metrics byte-identical across runs
        c.out_dir = "runs/smoke";
        return c;
    }
    throw ConfigError("unknown preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// JSON (config files). Unknown keys are errors that name the offending key.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_keys(const Json& j, const std::string& prefix,
                       std::initializer_list<const char*> allowed) {
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) {
            if (key == a) {
                ok = true;
                break;
            }
        }
        if (!ok) {
            throw ConfigError("config: unknown key '" + prefix + key + "'");
        }
    }
}

template <class T>
void maybe(const Json& j, const char* key, T& slot) {
    if (j.contains(key)) slot = j.at(key).get<T>();
}

}  // namespace detail

inline void apply_json(const Json& j, TrainConfig& c) {
    detail::check_keys(j, "",
                       {"preset", "family", "model", "mcmc", "loss", "data", "base_lr",
                        "effective_batch_size", "micro_batch_size", "warmup_steps",
                        "warmup_divider", "min_lr_scale", "weight_decay", "grad_clip",
                        "beta1", "beta2", "adam_eps", "max_steps", "eval_interval",
                        "eval_batches", "stop_at_val_metric", "seed",
                        "wall_time_in_metrics", "out_dir", "metrics_file",
                        "checkpoint_file"});
    if (j.contains("family")) {
        const std::string f = j.at("family").get<std::string>();
        if (f == "baseline") c.family = Family::baseline;
        else if (f == "ebwm") c.family = Family::ebwm;
        else throw ConfigError("config: unknown key value for 'family': " + f);
    }
    if (j.contains("model")) {
        const Json& m = j.at("model");
        detail::check_keys(m, "model.",
                           {"mode", "embed_dim", "heads", "blocks", "context_length",
                            "vocab_size", "feature_dim", "tie_embedding_head",
                            "separate_prediction_projections", "scale_self_score",
                            "init_std", "rms_eps"});
        if (m.contains("mode")) {
            const std::string s = m.at("mode").get<std::string>();
            if (s == "discrete") c.model.mode = Mode::discrete;
            else if (s == "continuous") c.model.mode = Mode::continuous;
            else throw ConfigError("config: unknown key value for 'model.mode': " + s);
        }
        detail::maybe(m, "embed_dim", c.model.embed_dim);
        detail::maybe(m, "heads", c.model.heads);
        detail::maybe(m, "blocks", c.model.blocks);
        detail::maybe(m, "context_length", c.model.context_length);
        detail::maybe(m, "vocab_size", c.model.vocab_size);
        detail::maybe(m, "feature_dim", c.model.feature_dim);
        detail::maybe(m, "tie_embedding_head", c.model.tie_embedding_head);
        detail::maybe(m, "separate_prediction_projections",
                      c.model.separate_prediction_projections);
        detail::maybe(m, "scale_self_score", c.model.scale_self_score);
        detail::maybe(m, "init_std", c.model.init_std);
        detail::maybe(m, "rms_eps", c.model.rms_eps);
    }
    if (j.contains("mcmc")) {
        const Json& m = j.at("mcmc");
        detail::check_keys(m, "mcmc.",
                           {"steps", "alpha_init", "alpha_learnable", "alpha_per_step",
                            "alpha_lr_multiplier", "clamp_enabled", "clamp_bound",
                            "noise_scale", "noise_learnable", "init_strategy",
                            "init_noise_scale", "energy_cutoff", "max_steps",
                            "truncated"});
        detail::maybe(m, "steps", c.mcmc.steps);
        detail::maybe(m, "alpha_init", c.mcmc.alpha_init);
        detail::maybe(m, "alpha_learnable", c.mcmc.alpha_learnable);
        detail::maybe(m, "alpha_per_step", c.mcmc.alpha_per_step);
        detail::maybe(m, "alpha_lr_multiplier", c.mcmc.alpha_lr_multiplier);
        detail::maybe(m, "clamp_enabled", c.mcmc.clamp_enabled);
        detail::maybe(m, "clamp_bound", c.mcmc.clamp_bound);
        detail::maybe(m, "noise_scale", c.mcmc.noise_scale);
        detail::maybe(m, "noise_learnable", c.mcmc.noise_learnable);
        if (m.contains("init_strategy")) {
            c.mcmc.init_strategy = init_strategy_from(m.at("init_strategy").get<std::string>());
        }
        detail::maybe(m, "init_noise_scale", c.mcmc.init_noise_scale);
        if (m.contains("energy_cutoff") && !m.at("energy_cutoff").is_null()) {
            c.mcmc.energy_cutoff = m.at("energy_cutoff").get<double>();
        }
        if (m.contains("max_steps") && !m.at("max_steps").is_null()) {
            c.mcmc.max_steps = m.at("max_steps").get<int64_t>();
        }
        detail::maybe(m, "truncated", c.mcmc.truncated);
    }
    if (j.contains("loss")) {
        const Json& m = j.at("loss");
        detail::check_keys(m, "loss.",
                           {"reconstruction_coefficient", "energy_loss_coefficient",
                            "bounds_loss_coefficient", "energy_distance",
                            "energy_labels_per_step"});
        detail::maybe(m, "reconstruction_coefficient", c.loss.reconstruction_coefficient);
        detail::maybe(m, "energy_loss_coefficient", c.loss.energy_loss_coefficient);
        detail::maybe(m, "bounds_loss_coefficient", c.loss.bounds_loss_coefficient);
        if (m.contains("energy_distance")) {
            const std::string s = m.at("energy_distance").get<std::string>();
            if (s == "squared") c.loss.energy_distance = EnergyDistance::squared;
            else if (s == "absolute") c.loss.energy_distance = EnergyDistance::absolute;
            else throw ConfigError("config: unknown key value for 'loss.energy_distance': " + s);
        }
        detail::maybe(m, "energy_labels_per_step", c.loss.energy_labels_per_step);
    }
    if (j.contains("data")) {
        const Json& m = j.at("data");
        detail::check_keys(m, "data.",
                           {"kind", "feature_dim", "gamma", "mixing", "corpus_path",
                            "synthetic_bytes", "val_fraction", "seed"});
        if (m.contains("kind")) {
            const std::string s = m.at("kind").get<std::string>();
            if (s == "ar1") c.data.kind = DataKind::ar1;
            else if (s == "bytes") c.data.kind = DataKind::bytes;
            else throw ConfigError("config: unknown key value for 'data.kind': " + s);
        }
        detail::maybe(m, "feature_dim", c.data.feature_dim);
        detail::maybe(m, "gamma", c.data.gamma);
        detail::maybe(m, "mixing", c.data.mixing);
        detail::maybe(m, "corpus_path", c.data.corpus_path);
        detail::maybe(m, "synthetic_bytes", c.data.synthetic_bytes);
        detail::maybe(m, "val_fraction", c.data.val_fraction);
        detail::maybe(m, "seed", c.data.seed);
    }
    detail::maybe(j, "base_lr", c.base_lr);
    detail::maybe(j, "effective_batch_size", c.effective_batch_size);
    detail::maybe(j, "micro_batch_size", c.micro_batch_size);
    detail::maybe(j, "warmup_steps", c.warmup_steps);
    detail::maybe(j, "warmup_divider", c.warmup_divider);
    detail::maybe(j, "min_lr_scale", c.min_lr_scale);
    detail::maybe(j, "weight_decay", c.weight_decay);
    detail::maybe(j, "grad_clip", c.grad_clip);
    detail::maybe(j, "beta1", c.beta1);
    detail::maybe(j, "beta2", c.beta2);
    detail::maybe(j, "adam_eps", c.adam_eps);
    detail::maybe(j, "max_steps", c.max_steps);
    detail::maybe(j, "eval_interval", c.eval_interval);
    detail::maybe(j, "eval_batches", c.eval_batches);
    if (j.contains("stop_at_val_metric") && !j.at("stop_at_val_metric").is_null()) {
        c.stop_at_val_metric = j.at("stop_at_val_metric").get<double>();
    }
    detail::maybe(j, "seed", c.seed);
    detail::maybe(j, "wall_time_in_metrics", c.wall_time_in_metrics);
    detail::maybe(j, "out_dir", c.out_dir);
    detail::maybe(j, "metrics_file", c.metrics_file);
    detail::maybe(j, "checkpoint_file", c.checkpoint_file);
}

inline TrainConfig config_from_json(const Json& j) {
    TrainConfig c;
    if (j.contains("preset")) {
        c = preset_config(j.at("preset").get<std::string>());
    }
    apply_json(j, c);
    c.validate();
    return c;
}

// Full round-trippable dump; also the basis for config-delta audits.
inline Json config_to_json(const TrainConfig& c) {
    Json j;
    j["family"] = to_string(c.family);
    Json m;
    m["mode"] = to_string(c.model.mode);
    m["embed_dim"] = c.model.embed_dim;
    m["heads"] = c.model.heads;
    m["blocks"] = c.model.blocks;
    m["context_length"] = c.model.context_length;
    m["vocab_size"] = c.model.vocab_size;
    m["feature_dim"] = c.model.feature_dim;
    m["tie_embedding_head"] = c.model.tie_embedding_head;
    m["separate_prediction_projections"] = c.model.separate_prediction_projections;
    m["scale_self_score"] = c.model.scale_self_score;
    m["init_std"] = c.model.init_std;
    m["rms_eps"] = c.model.rms_eps;
    j["model"] = m;
    Json mc;
    mc["steps"] = c.mcmc.steps;
    mc["alpha_init"] = c.mcmc.alpha_init;
    mc["alpha_learnable"] = c.mcmc.alpha_learnable;
    mc["alpha_per_step"] = c.mcmc.alpha_per_step;
    mc["alpha_lr_multiplier"] = c.mcmc.alpha_lr_multiplier;
    mc["clamp_enabled"] = c.mcmc.clamp_enabled;
    mc["clamp_bound"] = c.mcmc.clamp_bound;
    mc["noise_scale"] = c.mcmc.noise_scale;
    mc["noise_learnable"] = c.mcmc.noise_learnable;
    mc["init_strategy"] = to_string(c.mcmc.init_strategy);
    mc["init_noise_scale"] = c.mcmc.init_noise_scale;
    if (c.mcmc.energy_cutoff.has_value()) mc["energy_cutoff"] = *c.mcmc.energy_cutoff;
    if (c.mcmc.max_steps.has_value()) mc["max_steps"] = *c.mcmc.max_steps;
    mc["truncated"] = c.mcmc.truncated;
    j["mcmc"] = mc;
    Json lo;
    lo["reconstruction_coefficient"] = c.loss.reconstruction_coefficient;
    lo["energy_loss_coefficient"] = c.loss.energy_loss_coefficient;
    lo["bounds_loss_coefficient"] = c.loss.bounds_loss_coefficient;
    lo["energy_distance"] =
        c.loss.energy_distance == EnergyDistance::squared ? "squared" : "absolute";
    lo["energy_labels_per_step"] = c.loss.energy_labels_per_step;
    j["loss"] = lo;
    Json d;
    d["kind"] = c.data.kind == DataKind::ar1 ? "ar1" : "bytes";
    d["feature_dim"] = c.data.feature_dim;
    d["gamma"] = c.data.gamma;
    d["mixing"] = c.data.mixing;
    d["corpus_path"] = c.data.corpus_path;
    d["synthetic_bytes"] = c.data.synthetic_bytes;
    d["val_fraction"] = c.data.val_fraction;
    d["seed"] = c.data.seed;
    j["data"] = d;
    j["base_lr"] = c.base_lr;
    j["effective_batch_size"] = c.effective_batch_size;
    j["micro_batch_size"] = c.micro_batch_size;
    j["warmup_steps"] = c.warmup_steps;
    j["warmup_divider"] = c.warmup_divider;
    j["min_lr_scale"] = c.min_lr_scale;
    j["weight_decay"] = c.weight_decay;
    j["grad_clip"] = c.grad_clip;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["adam_eps"] = c.adam_eps;
    j["max_steps"] = c.max_steps;
    j["eval_interval"] = c.eval_interval;
    j["eval_batches"] = c.eval_batches;
    if (c.stop_at_val_metric.has_value()) j["stop_at_val_metric"] = *c.stop_at_val_metric;
    j["seed"] = c.seed;
    j["wall_time_in_metrics"] = c.wall_time_in_metrics;
    j["out_dir"] = c.out_dir;
    j["metrics_file"] = c.metrics_file;
    j["checkpoint_file"] = c.checkpoint_file;
    return j;
}

}  // namespace ebwm
