#pragma once

#include <fstream>
#include <optional>
#include <string>

#include "ebwm/common.hpp"

namespace ebwm {

// Accounting convention for every FLOPs figure the harness reports. P counts
// transformer-block parameters only (embeddings and heads excluded) so that
// doubling the block count doubles the estimate.
inline const char* flops_convention() {
    return "forward=2*P*T per sequence with P=block params; backward=2x forward; "
           "ebwm inference=K*(forward+input-grad backward)=6*K*P*T; "
           "ebwm training=chain forward+backward plus outer backward=18*K*P*T; "
           "per-step totals multiply by the effective batch; validation "
           "perplexity aggregates as mean token-level cross-entropy over the split";
}

struct MetricsRow {
    int64_t step = 0;
    int64_t epoch = 0;
    std::string split = "train";
    double loss = 0.0;                       // objective as trained / evaluated
    std::optional<double> perplexity_or_mse; // exp(CE) discrete, plain MSE continuous
    std::optional<double> copy_baseline;     // continuous mode only
    std::optional<double> mean_first_step_energy;
    std::optional<double> mean_last_step_energy;
    std::optional<double> alpha_value;
    std::optional<double> grad_norm;
    std::optional<double> lr;
    double cumulative_flops = 0.0;
    double wall_seconds = 0.0;
};

// Append-only CSV with one flushed line per row, so the file stays parseable
// after an abrupt termination. The header carries the FLOPs convention.
class MetricsWriter {
public:
    MetricsWriter() = default;

    explicit MetricsWriter(const std::string& path) : os_(path, std::ios::trunc) {
        if (!os_) throw Error("metrics: cannot open '" + path + "' for writing");
        os_ << "# flops_convention: " << flops_convention() << "\n";
        os_ << "step,epoch,split,loss,perplexity_or_mse,copy_baseline_score,"
               "mean_first_step_energy,mean_last_step_energy,alpha_value,"
               "grad_norm,lr,cumulative_flops,wall_seconds\n";
        os_.flush();
    }

    void append(const MetricsRow& r) {
        os_ << r.step << ',' << r.epoch << ',' << r.split << ',' << num(r.loss) << ','
            << opt(r.perplexity_or_mse) << ',' << opt(r.copy_baseline) << ','
            << opt(r.mean_first_step_energy) << ',' << opt(r.mean_last_step_energy) << ','
            << opt(r.alpha_value) << ',' << opt(r.grad_norm) << ',' << opt(r.lr) << ','
            << num(r.cumulative_flops) << ',' << num(r.wall_seconds) << '\n';
        os_.flush();
        if (!os_) throw Error("metrics: write failed");
    }

    bool open() const { return os_.is_open(); }

private:
    static std::string num(double v) { return strf("%.9g", v); }
    static std::string opt(const std::optional<double>& v) {
        return v.has_value() ? num(*v) : std::string();
    }

    std::ofstream os_;
};

}  // namespace ebwm
