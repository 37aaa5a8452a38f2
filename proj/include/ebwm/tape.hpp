#pragma once

#include <atomic>
#include <cstring>
#include <functional>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "ebwm/tensor.hpp"

namespace ebwm {

template <class S>
using GradList = std::vector<std::optional<Tensor<S>>>;

// Reverse-mode tape over tensor-granularity primitives.
//
// Entries are recorded in execution order, so every entry's inputs precede it
// and reverse iteration is a valid reverse-topological walk. Backward rules
// are implemented with the public ops themselves; when grad() runs with
// create_graph the rules execute while the tape is still recording, so the
// returned gradients are ordinary taped tensors and can be differentiated
// again. That re-entrant step is the whole second-order mechanism.
//
// A tape is single-threaded: one tape per training step. Tensors without a
// tape node are immutable constants and safe to share across threads.
template <class S>
class Tape {
public:
    using BackwardFn = std::function<GradList<S>(
        const Tensor<S>& grad_out, const std::vector<Tensor<S>>& inputs,
        const Tensor<S>& output)>;
    using ForwardFn =
        std::function<Tensor<S>(const std::vector<Tensor<S>>& inputs)>;

    Tape() : serial_(next_serial()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    uint64_t serial() const { return serial_; }
    size_t size() const { return nodes_.size(); }

    static Tape*& active_slot() {
        thread_local Tape* active = nullptr;
        return active;
    }
    static Tape* active() { return active_slot(); }

    bool recording() const { return pause_depth_ == 0; }

    void pause() { ++pause_depth_; }
    void resume() { --pause_depth_; }

    // Which inputs of the node currently being differentiated actually need a
    // gradient (per the reachability pruning in grad()). Backward rules with
    // expensive per-input work may consult this and return nullopt for dead
    // inputs; nullptr means "assume everything is needed".
    static const std::vector<char>*& needs_slot() {
        thread_local const std::vector<char>* needs = nullptr;
        return needs;
    }
    static bool input_needed(size_t k) {
        const std::vector<char>* needs = needs_slot();
        return needs == nullptr || k >= needs->size() || (*needs)[k] != 0;
    }

    // Registers a leaf (typically a parameter). Idempotent per tape.
    void watch(Tensor<S>& t) {
        if (t.on_tape(serial_)) return;
        NodeRec rec;
        rec.kind = "leaf";
        t.bind_node(static_cast<int64_t>(nodes_.size()), serial_);
        rec.output = t;
        nodes_.push_back(std::move(rec));
    }

    int64_t record(const char* kind, std::vector<Tensor<S>> inputs, Tensor<S>& out,
                   BackwardFn bwd, ForwardFn fwd) {
        NodeRec rec;
        rec.kind = kind;
        rec.in_ids.reserve(inputs.size());
        for (const auto& t : inputs) {
            rec.in_ids.push_back(t.on_tape(serial_) ? t.node() : -1);
        }
        rec.inputs = std::move(inputs);
        rec.bwd = std::move(bwd);
        rec.fwd = std::move(fwd);
        const int64_t id = static_cast<int64_t>(nodes_.size());
        out.bind_node(id, serial_);
        rec.output = out;
        nodes_.push_back(std::move(rec));
        return id;
    }

    // d(output)/d(wrt_i) for a scalar output. With create_graph the gradient
    // computation is itself recorded, so the results can be differentiated
    // again (this tape must be the active one). Without it, recording is
    // suspended for the walk and plain constants come back.
    std::vector<Tensor<S>> grad(const Tensor<S>& output,
                                const std::vector<Tensor<S>>& wrt,
                                bool create_graph);

    // Re-runs every recorded forward rule on the original leaf values and
    // returns the max abs deviation from the recorded outputs. 0 means the
    // replay is bit-identical.
    double replay_max_abs_diff() {
        pause();
        std::vector<Tensor<S>> recomputed(nodes_.size());
        double worst = 0.0;
        for (size_t i = 0; i < nodes_.size(); ++i) {
            if (!nodes_[i].fwd) {
                recomputed[i] = nodes_[i].output;
                continue;
            }
            std::vector<Tensor<S>> ins = nodes_[i].inputs;
            for (size_t k = 0; k < ins.size(); ++k) {
                const int64_t src = nodes_[i].in_ids[k];
                if (src >= 0) ins[k] = recomputed[static_cast<size_t>(src)];
            }
            Tensor<S> again = nodes_[i].fwd(ins);
            const Tensor<S>& ref = nodes_[i].output;
            if (again.numel() == ref.numel()) {
                if (std::memcmp(again.data(), ref.data(),
                                sizeof(S) * static_cast<size_t>(ref.numel())) != 0) {
                    worst = std::max(worst, max_abs_diff(again, ref));
                    // force a nonzero report even for differing NaN bit patterns
                    worst = std::max(worst, std::numeric_limits<double>::min());
                }
            } else {
                worst = std::numeric_limits<double>::infinity();
            }
            recomputed[i] = std::move(again);
        }
        resume();
        return worst;
    }

    struct PauseScope {
        explicit PauseScope(Tape* t) : tape(t) {
            if (tape) tape->pause();
        }
        ~PauseScope() {
            if (tape) tape->resume();
        }
        Tape* tape;
    };

private:
    struct NodeRec {
        const char* kind = "";
        std::vector<int64_t> in_ids;
        std::vector<Tensor<S>> inputs;
        Tensor<S> output;
        BackwardFn bwd;  // empty for leaves
        ForwardFn fwd;   // empty for leaves
    };

    static uint64_t next_serial() {
        static std::atomic<uint64_t> counter{1};
        return counter.fetch_add(1);
    }

    std::vector<NodeRec> nodes_;
    uint64_t serial_ = 0;
    int pause_depth_ = 0;
};

// Activates a tape for the current thread for the scope's lifetime.
template <class S>
class TapeScope {
public:
    explicit TapeScope(Tape<S>& tape) : prev_(Tape<S>::active_slot()) {
        Tape<S>::active_slot() = &tape;
    }
    ~TapeScope() { Tape<S>::active_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<S>* prev_;
};

// Suspends recording on the active tape (no-op when none is active).
template <class S>
class NoGradScope {
public:
    NoGradScope() : tape_(Tape<S>::active()) {
        if (tape_) tape_->pause();
    }
    ~NoGradScope() {
        if (tape_) tape_->resume();
    }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape<S>* tape_;
};

}  // namespace ebwm
