#pragma once

#include <functional>

#include "ebwm/ops.hpp"
#include "ebwm/tape.hpp"
#include "ebwm/tensor.hpp"

namespace ebwm {

// Central-difference gradient oracle, independent of the tape's backward
// rules: f is re-evaluated at x ± eps per coordinate with recording off.
// Returns the max over coordinates of |analytic - numeric| / max(|analytic|,
// |numeric|, abs_floor); the floor makes near-zero gradients compare on an
// absolute scale. f64 recommended — at f32 the difference quotient drowns in
// rounding.
template <class S>
double finite_difference_check(const std::function<Tensor<S>(const Tensor<S>&)>& f,
                               const Tensor<S>& x, double eps,
                               double abs_floor = 1e-6) {
    Tensor<S> analytic;
    {
        Tape<S> tape;
        TapeScope<S> scope(tape);
        Tensor<S> probe = x.clone();
        tape.watch(probe);
        Tensor<S> y = f(probe);
        if (y.numel() != 1) {
            throw ValueError("finite_difference_check: f must return a scalar");
        }
        analytic = tape.grad(y, {probe}, false)[0];
    }

    Tensor<S> work = x.clone();
    double worst = 0.0;
    for (int64_t i = 0; i < work.numel(); ++i) {
        const S saved = work.data()[i];
        work.data()[i] = static_cast<S>(static_cast<double>(saved) + eps);
        const double up = static_cast<double>(f(work).item());
        work.data()[i] = static_cast<S>(static_cast<double>(saved) - eps);
        const double down = static_cast<double>(f(work).item());
        work.data()[i] = saved;
        const double numeric = (up - down) / (2.0 * eps);
        const double a = static_cast<double>(analytic.data()[i]);
        const double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
        worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    return worst;
}

// Same oracle against an externally supplied analytic gradient, probing a
// subset of coordinates of a parameter buffer while f() recomputes the full
// objective. Used for weight-space checks where probing every coordinate is
// pointless.
template <class S>
double finite_difference_check_coords(const std::function<double()>& f,
                                      Tensor<S>& param, const Tensor<S>& analytic,
                                      const std::vector<int64_t>& coords, double eps,
                                      double abs_floor = 1e-6) {
    require_same_shape(param, analytic, "finite_difference_check_coords");
    double worst = 0.0;
    for (int64_t i : coords) {
        const S saved = param.data()[i];
        param.data()[i] = static_cast<S>(static_cast<double>(saved) + eps);
        const double up = f();
        param.data()[i] = static_cast<S>(static_cast<double>(saved) - eps);
        const double down = f();
        param.data()[i] = saved;
        const double numeric = (up - down) / (2.0 * eps);
        const double a = static_cast<double>(analytic.data()[i]);
        const double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
        worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    return worst;
}

}  // namespace ebwm
