#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

#include "ebwm/tape.hpp"
#include "ebwm/tensor.hpp"

namespace ebwm {

namespace detail {

// Records only when a tape is actively recording; otherwise the lambdas are
// never converted to std::function and no input copies are made, which keeps
// pure evaluation (and the non-create-graph backward walk) allocation-light.
template <class S, class Bwd, class Fwd, class... Ins>
Tensor<S> record_op(const char* kind, Tensor<S> out, Bwd&& bwd, Fwd&& fwd,
                    const Ins&... ins) {
    auto* tape = Tape<S>::active();
    if (tape && tape->recording()) {
        tape->record(kind, std::vector<Tensor<S>>{ins...}, out,
                     typename Tape<S>::BackwardFn(std::forward<Bwd>(bwd)),
                     typename Tape<S>::ForwardFn(std::forward<Fwd>(fwd)));
    }
    return out;
}

template <class S, class Bwd, class Fwd>
Tensor<S> record_op_list(const char* kind, Tensor<S> out, Bwd&& bwd, Fwd&& fwd,
                         const std::vector<Tensor<S>>& ins) {
    auto* tape = Tape<S>::active();
    if (tape && tape->recording()) {
        tape->record(kind, ins, out, typename Tape<S>::BackwardFn(std::forward<Bwd>(bwd)),
                     typename Tape<S>::ForwardFn(std::forward<Fwd>(fwd)));
    }
    return out;
}

enum class Bcast { same, scalar_b, suffix_b, lastdim1_b };

template <class S>
Bcast classify_broadcast(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa == sb) return Bcast::same;
    if (b.numel() == 1) return Bcast::scalar_b;
    if (sb.size() == sa.size() && !sa.empty() && sb.back() == 1 &&
        std::equal(sa.begin(), sa.end() - 1, sb.begin())) {
        return Bcast::lastdim1_b;
    }
    if (sb.size() < sa.size() && !sb.empty() &&
        std::equal(sb.begin(), sb.end(), sa.end() - sb.size())) {
        return Bcast::suffix_b;
    }
    throw ShapeError(strf("%s: shape mismatch %s vs %s (broadcast limited to "
                          "scalar, trailing-suffix and size-1 last axis)",
                          op, shape_str(sa).c_str(), shape_str(sb).c_str()));
}

template <class S, class F>
Tensor<S> binary_forward(const Tensor<S>& a, const Tensor<S>& b, Bcast mode, F&& f) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    const int64_t n = a.numel();
    switch (mode) {
        case Bcast::same:
            for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
            break;
        case Bcast::scalar_b: {
            const S bv = pb[0];
            for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], bv);
            break;
        }
        case Bcast::suffix_b: {
            const int64_t bn = b.numel();
            for (int64_t base = 0; base < n; base += bn) {
                for (int64_t j = 0; j < bn; ++j) {
                    po[base + j] = f(pa[base + j], pb[j]);
                }
            }
            break;
        }
        case Bcast::lastdim1_b: {
            const int64_t last = a.shape().back();
            const int64_t rows = n / last;
            for (int64_t r = 0; r < rows; ++r) {
                const S bv = pb[r];
                const S* ar = pa + r * last;
                S* orow = po + r * last;
                for (int64_t j = 0; j < last; ++j) orow[j] = f(ar[j], bv);
            }
            break;
        }
    }
    return out;
}

template <class S, class F>
Tensor<S> map_forward(const Tensor<S>& a, F&& f) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const S* pa = a.data();
    S* po = out.data();
    for (int64_t i = 0; i < a.numel(); ++i) po[i] = f(pa[i]);
    return out;
}

}  // namespace detail

template <class S>
Tensor<S> ones(Shape shape) {
    return Tensor<S>::full(std::move(shape), S(1));
}

// forward declarations used by backward rules
template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b);
template <class S>
Tensor<S> neg(const Tensor<S>& a);
template <class S>
Tensor<S> mul_scalar(const Tensor<S>& a, double c);
template <class S>
Tensor<S> sum(const Tensor<S>& a, int axis, bool keepdim);
template <class S>
Tensor<S> sum_all(const Tensor<S>& a);
template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape);
template <class S>
Tensor<S> slice(const Tensor<S>& a, int axis, int64_t start, int64_t len);
template <class S>
Tensor<S> expand_axis(const Tensor<S>& a, int axis, int64_t n, bool had_axis);
template <class S>
Tensor<S> transpose(const Tensor<S>& a, int axis0, int axis1);
template <class S>
Tensor<S> gather_rows(const Tensor<S>& table, const std::vector<int64_t>& ids);
template <class S>
Tensor<S> scatter_rows(const Tensor<S>& src, const std::vector<int64_t>& ids, int64_t rows);
template <class S>
Tensor<S> batched_matmul(const Tensor<S>& a, const Tensor<S>& b);
template <class S>
Tensor<S> sigmoid(const Tensor<S>& a);
template <class S>
Tensor<S> pow_scalar(const Tensor<S>& a, double p);

namespace detail {

// Reduces a full-shaped gradient back to the broadcast operand's shape.
template <class S>
Tensor<S> reduce_to_operand(const Tensor<S>& g, const Shape& b_shape, Bcast mode) {
    switch (mode) {
        case Bcast::same:
            return g;
        case Bcast::scalar_b:
            return reshape(sum_all(g), Shape(b_shape));
        case Bcast::lastdim1_b:
            return sum(g, -1, true);
        case Bcast::suffix_b: {
            Tensor<S> r = g;
            while (r.shape().size() > b_shape.size()) {
                r = sum(r, 0, false);
            }
            return r;
        }
    }
    throw Error("unreachable");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops (second operand may broadcast)
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    const auto mode = detail::classify_broadcast(a, b, "add");
    Tensor<S> out = detail::binary_forward(a, b, mode, [](S x, S y) { return x + y; });
    return detail::record_op<S>(
        "add", std::move(out),
        [mode](const Tensor<S>& g, const std::vector<Tensor<S>>& ins,
               const Tensor<S>&) -> GradList<S> {
            return {g, detail::reduce_to_operand<S>(g, ins[1].shape(), mode)};
        },
        [mode](const std::vector<Tensor<S>>& ins) {
            return detail::binary_forward(ins[0], ins[1], mode,
                                          [](S x, S y) { return x + y; });
        },
        a, b);
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    const auto mode = detail::classify_broadcast(a, b, "sub");
    Tensor<S> out = detail::binary_forward(a, b, mode, [](S x, S y) { return x - y; });
    return detail::record_op<S>(
        "sub", std::move(out),
        [mode](const Tensor<S>& g, const std::vector<Tensor<S>>& ins,
               const Tensor<S>&) -> GradList<S> {
            return {g, neg(detail::reduce_to_operand<S>(g, ins[1].shape(), mode))};
        },
        [mode](const std::vector<Tensor<S>>& ins) {
            return detail::binary_forward(ins[0], ins[1], mode,
                                          [](S x, S y) { return x - y; });
        },
        a, b);
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    const auto mode = detail::classify_broadcast(a, b, "mul");
    Tensor<S> out = detail::binary_forward(a, b, mode, [](S x, S y) { return x * y; });
    return detail::record_op<S>(
        "mul", std::move(out),
        [mode](const Tensor<S>& g, const std::vector<Tensor<S>>& ins,
               const Tensor<S>&) -> GradList<S> {
            GradList<S> grads(2);
            if (Tape<S>::input_needed(0)) grads[0] = mul(g, ins[1]);
            if (Tape<S>::input_needed(1)) {
                grads[1] = detail::reduce_to_operand<S>(mul(g, ins[0]), ins[1].shape(), mode);
            }
            return grads;
        },
        [mode](const std::vector<Tensor<S>>& ins) {
            return detail::binary_forward(ins[0], ins[1], mode,
                                          [](S x, S y) { return x * y; });
        },
        a, b);
}

template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
    const auto mode = detail::classify_broadcast(a, b, "div");
    for (S v : b.values()) {
        if (v == S(0)) throw ValueError("div: division by zero");
    }
    Tensor<S> out = detail::binary_forward(a, b, mode, [](S x, S y) { return x / y; });
    return detail::record_op<S>(
        "div", std::move(out),
        [mode](const Tensor<S>& g, const std::vector<Tensor<S>>& ins,
               const Tensor<S>& out) -> GradList<S> {
            Tensor<S> da = div(g, ins[1]);
            // d/db (a/b) = -out/b
            Tensor<S> db_full = neg(mul(da, out));
            return {da, detail::reduce_to_operand<S>(db_full, ins[1].shape(), mode)};
        },
        [mode](const std::vector<Tensor<S>>& ins) {
            return detail::binary_forward(ins[0], ins[1], mode,
                                          [](S x, S y) { return x / y; });
        },
        a, b);
}

// ---------------------------------------------------------------------------
// elementwise unary / scalar-attribute ops
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> neg(const Tensor<S>& a) {
    Tensor<S> out = detail::map_forward(a, [](S x) { return -x; });
    return detail::record_op<S>(
        "neg", std::move(out),
        [](const Tensor<S>& g, const std::vector<Tensor<S>>&, const Tensor<S>&) -> GradList<S> {
            return {neg(g)};
        },
        [](const std::vector<Tensor<S>>& ins) {
            return detail::map_forward(ins[0], [](S x) { return -x; });
        },
        a);
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, double c) {
    Tensor<S> out = detail::map_forward(a, [c](S x) { return static_cast<S>(x + c); });
    return detail::record_op<S>(
        "add-scalar", std::move(out),
        [](const Tensor<S>& g, const std::vector<Tensor<S>>&, const Tensor<S>&) -> GradList<S> {
            return {g};
        },
        [c](const std::vector<Tensor<S>>& ins) {
            return detail::map_forward(ins[0], [c](S x) { return static_cast<S>(x + c); });
        },
        a);
}

template <class S>
Tensor<S> mul_scalar(const Tensor<S>& a, double c) {
    Tensor<S> out = detail::map_forward(a, [c](S x) { return static_cast<S>(x * c); });
    return detail::record_op<S>(
        "mul-scalar", std::move(out),
        [c](const Tensor<S>& g, const std::vector<Tensor<S>>&, const Tensor<S>&) -> GradList<S> {
            return {mul_scalar(g, c)};
        },
        [c](const std::vector<Tensor<S>>& ins) {
            return detail::map_forward(ins[0], [c](S x) { return static_cast<S>(x * c); });
        },
        a);
}

template <class S>
Tensor<S> exp(const Tensor<S>& a) {
    auto f = [](S x) { return static_cast<S>(std::exp(static_cast<double>(x))); };
    Tensor<S> out = detail::map_forward(a, f);
    return detail::record_op<S>(
        "exp", std::move(out),
        [](const Tensor<S>& g, const std::vector<Tensor<S>>&, const Tensor<S>& out) -> GradList<S> {
            return {mul(g, out)};
        },
        [f](const std::vector<Tensor<S>>& ins) { return detail::map_forward(ins[0], f); },
        a);
}

template <class S>
Tensor<S> log(const Tensor<S>& a) {
    for (S v : a.values()) {
        if (!(v > S(0))) {
            throw ValueError(strf("log: non-positive input %g", static_cast<double>(v)));
        }
    }
    auto f = [](S x) { return static_cast<S>(std::log(static_cast<double>(x))); };
    Tensor<S> out = detail::map_forward(a, f);
    return detail::record_op<S>(
        "log", std::move(out),
        [](const Tensor<S>& g, const std::vector<Tensor<S>>& ins, const Tensor<S>&) -> GradList<S> {
            return {div(g, ins[0])};
        },
        [f](const std::vector<Tensor<S>>& ins) { return detail::map_forward(ins[0], f); },
        a);
}

template <class S>
Tensor<S> sqrt(const Tensor<S>& a) {
    for (S v : a.values()) {
        if (v < S(0)) throw ValueError(strf("sqrt: negative input %g", static_cast<double>(v)));
    }
    auto f = [](S x) { return static_cast<S>(std::sqrt(static_cast<double>(x))); };
    Tensor<S> out = detail::map_forward(a, f);
    return detail::record_op<S>(
        "sqrt", std::move(out),
        [](const Tensor<S>& g, const std::vector<Tensor<S>>&, const Tensor<S>& out) -> GradList<S> {
            return {mul_scalar(div(g, out), 0.5)};
        },
        [f](const std::vector<Tensor<S>>& ins) { return detail::map_forward(ins[0], f); },
        a);
}

template <class S>
Tensor<S> pow_scalar(const Tensor<S>& a, double p) {
    const bool integral = p == std::floor(p);
    for (S v : a.values()) {
        if (!integral && v < S(0)) {
            throw ValueError(strf("power: negative base %g with fractional exponent %g",
                                  static_cast<double>(v), p));
        }
        if (p < 0.0 && v == S(0)) {
            throw ValueError("power: zero base with negative exponent");
        }
    }
    auto f = [p](S x) { return static_cast<S>(std::pow(static_cast<double>(x), p)); };
    Tensor<S> out = detail::map_forward(a, f);
    return detail::record_op<S>(
        "power", std::move(out),
        [p](const Tensor<S>& g, const std::vector<Tensor<S>>& ins, const Tensor<S>&) -> GradList<S> {
            if (p == 0.0) {
                return {Tensor<S>::zeros(ins[0].shape())};
            }
            return {mul_scalar(mul(g, pow_scalar(ins[0], p - 1.0)), p)};
        },
        [f](const std::vector<Tensor<S>>& ins) { return detail::map_forward(ins[0], f); },
        a);
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& a) {
    auto f = [](S x) {
        const double v = static_cast<double>(x);
        const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                  : std::exp(v) / (1.0 + std::exp(v));
        return static_cast<S>(s);
    };
    Tensor<S> out = detail::map_forward(a, f);
    return detail::record_op<S>(
        "sigmoid", std::move(out),
        [](const Tensor<S>& g, const std::vector<Tensor<S>>&, const Tensor<S>& out) -> GradList<S> {
            Tensor<S> one_minus = add_scalar(neg(out), 1.0);
            return {mul(mul(g, out), one_minus)};
        },
        [f](const std::vector<Tensor<S>>& ins) { return detail::map_forward(ins[0], f); },
        a);
}

template <class S>
Tensor<S> softplus(const Tensor<S>& a) {
    auto f = [](S x) {
        const double v = static_cast<double>(x);
        const double r = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
        return static_cast<S>(r);
    };
    Tensor<S> out = detail::map_forward(a, f);
    return detail::record_op<S>(
        "softplus", std::move(out),
        [](const Tensor<S>& g, const std::vector<Tensor<S>>& ins, const Tensor<S>&) -> GradList<S> {
            return {mul(g, sigmoid(ins[0]))};
        },
        [f](const std::vector<Tensor<S>>& ins) { return detail::map_forward(ins[0], f); },
        a);
}

template <class S>
Tensor<S> abs(const Tensor<S>& a) {
    auto f = [](S x) { return x < S(0) ? -x : x; };
    Tensor<S> out = detail::map_forward(a, f);
    return detail::record_op<S>(
        "abs", std::move(out),
        [](const Tensor<S>& g, const std::vector<Tensor<S>>& ins, const Tensor<S>&) -> GradList<S> {
            Tensor<S> sign = detail::map_forward(ins[0], [](S x) {
                return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0));
            });
            return {mul(g, sign)};
        },
        [f](const std::vector<Tensor<S>>& ins) { return detail::map_forward(ins[0], f); },
        a);
}

// Subgradient convention: pass-through on [lo, hi] inclusive (boundary counts
// as inside), zero strictly outside.
template <class S>
Tensor<S> clamp(const Tensor<S>& a, double lo, double hi) {
    if (!(lo <= hi)) {
        throw ShapeError(strf("clamp: lo %g > hi %g", lo, hi));
    }
    auto f = [lo, hi](S x) {
        const double v = static_cast<double>(x);
        return static_cast<S>(v < lo ? lo : (v > hi ? hi : v));
    };
    Tensor<S> out = detail::map_forward(a, f);
    return detail::record_op<S>(
        "clamp", std::move(out),
        [lo, hi](const Tensor<S>& g, const std::vector<Tensor<S>>& ins,
                 const Tensor<S>&) -> GradList<S> {
            Tensor<S> mask = detail::map_forward(ins[0], [lo, hi](S x) {
                const double v = static_cast<double>(x);
                return (v >= lo && v <= hi) ? S(1) : S(0);
            });
            return {mul(g, mask)};
        },
        [f](const std::vector<Tensor<S>>& ins) { return detail::map_forward(ins[0], f); },
        a);
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
    if (numel_of(shape) != a.numel()) {
        throw ShapeError(strf("reshape: cannot view %s as %s",
                              a.shape_string().c_str(), shape_str(shape).c_str()));
    }
    Shape old = a.shape();
    Tensor<S> out(shape, a.buffer());
    return detail::record_op<S>(
        "reshape", std::move(out),
        [old](const Tensor<S>& g, const std::vector<Tensor<S>>&, const Tensor<S>&) -> GradList<S> {
            return {reshape(g, old)};
        },
        [shape](const std::vector<Tensor<S>>& ins) {
            return Tensor<S>(shape, ins[0].buffer());
        },
        a);
}

namespace detail {

// Swap-two-axes copy without per-element division: nested counters track the
// output offset as the input is scanned linearly.
template <class S>
Tensor<S> transpose_forward(const Tensor<S>& x, int i, int j) {
    const int nd = x.ndim();
    Shape out_shape = x.shape();
    std::swap(out_shape[i], out_shape[j]);
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    std::vector<int64_t> out_strides(nd, 1);
    for (int d = nd - 2; d >= 0; --d) {
        out_strides[d] = out_strides[d + 1] * out_shape[d + 1];
    }
    // stride of output advanced when input dim d increments
    std::vector<int64_t> advance(nd);
    for (int d = 0; d < nd; ++d) {
        int od = d == i ? j : (d == j ? i : d);
        advance[d] = out_strides[od];
    }
    const S* px = x.data();
    S* po = out.data();
    std::vector<int64_t> counter(nd, 0);
    int64_t dst = 0;
    const int64_t n = x.numel();
    for (int64_t lin = 0; lin < n; ++lin) {
        po[dst] = px[lin];
        for (int d = nd - 1; d >= 0; --d) {
            dst += advance[d];
            if (++counter[d] < x.shape()[d]) break;
            counter[d] = 0;
            dst -= advance[d] * x.shape()[d];
        }
    }
    return out;
}

}  // namespace detail

template <class S>
Tensor<S> transpose(const Tensor<S>& a, int axis0, int axis1) {
    const int i = a.normalize_axis(axis0);
    const int j = a.normalize_axis(axis1);
    Tensor<S> out = detail::transpose_forward(a, i, j);
    return detail::record_op<S>(
        "transpose", std::move(out),
        [i, j](const Tensor<S>& g, const std::vector<Tensor<S>>&, const Tensor<S>&) -> GradList<S> {
            return {transpose(g, i, j)};
        },
        [i, j](const std::vector<Tensor<S>>& ins) {
            return detail::transpose_forward(ins[0], i, j);
        },
        a);
}

namespace detail {

template <class S>
Tensor<S> pad_axis_forward(const Tensor<S>& x, int ax, int64_t start, int64_t full) {
    Shape out_shape = x.shape();
    const int64_t len = out_shape[ax];
    out_shape[ax] = full;
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    int64_t inner = 1;
    for (size_t d = ax + 1; d < out_shape.size(); ++d) inner *= out_shape[d];
    int64_t outer = 1;
    for (int d = 0; d < ax; ++d) outer *= out_shape[d];
    const S* px = x.data();
    S* po = out.data();
    for (int64_t o = 0; o < outer; ++o) {
        const S* src = px + o * len * inner;
        S* dst = po + (o * full + start) * inner;
        std::copy(src, src + len * inner, dst);
    }
    return out;
}

// Embeds `a` into a zero tensor whose `axis` has size `full`; inverse of slice.
template <class S>
Tensor<S> pad_axis(const Tensor<S>& a, int axis, int64_t start, int64_t full) {
    const int ax = a.normalize_axis(axis);
    const int64_t len = a.shape()[ax];
    if (start < 0 || start + len > full) {
        throw ShapeError(strf("pad_axis: window [%lld,%lld) outside size %lld",
                              static_cast<long long>(start),
                              static_cast<long long>(start + len),
                              static_cast<long long>(full)));
    }
    Tensor<S> out = pad_axis_forward(a, ax, start, full);
    return record_op<S>(
        "pad-axis", std::move(out),
        [ax, start, len](const Tensor<S>& g, const std::vector<Tensor<S>>&,
                         const Tensor<S>&) -> GradList<S> {
            return {slice(g, ax, start, len)};
        },
        [ax, start, full](const std::vector<Tensor<S>>& ins) {
            return pad_axis_forward(ins[0], ax, start, full);
        },
        a);
}

template <class S>
Tensor<S> slice_forward(const Tensor<S>& x, int ax, int64_t start, int64_t len) {
    Shape out_shape = x.shape();
    const int64_t full = out_shape[ax];
    out_shape[ax] = len;
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    int64_t inner = 1;
    for (size_t d = ax + 1; d < out_shape.size(); ++d) inner *= out_shape[d];
    int64_t outer = 1;
    for (int d = 0; d < ax; ++d) outer *= out_shape[d];
    const S* px = x.data();
    S* po = out.data();
    for (int64_t o = 0; o < outer; ++o) {
        const S* src = px + (o * full + start) * inner;
        std::copy(src, src + len * inner, po + o * len * inner);
    }
    return out;
}

}  // namespace detail

template <class S>
Tensor<S> slice(const Tensor<S>& a, int axis, int64_t start, int64_t len) {
    const int ax = a.normalize_axis(axis);
    const int64_t full = a.shape()[ax];
    if (start < 0 || len < 0 || start + len > full) {
        throw ShapeError(strf("slice: window [%lld,%lld) outside axis of size %lld",
                              static_cast<long long>(start),
                              static_cast<long long>(start + len),
                              static_cast<long long>(full)));
    }
    Tensor<S> out = detail::slice_forward(a, ax, start, len);
    return detail::record_op<S>(
        "slice", std::move(out),
        [ax, start, full](const Tensor<S>& g, const std::vector<Tensor<S>>&,
                          const Tensor<S>&) -> GradList<S> {
            return {detail::pad_axis(g, ax, start, full)};
        },
        [ax, start, len](const std::vector<Tensor<S>>& ins) {
            return detail::slice_forward(ins[0], ax, start, len);
        },
        a);
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const int ax = parts[0].normalize_axis(axis);
    Shape out_shape = parts[0].shape();
    int64_t total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != parts[0].ndim()) {
            throw ShapeError("concat: rank mismatch");
        }
        for (int d = 0; d < p.ndim(); ++d) {
            if (d != ax && p.shape()[d] != out_shape[d]) {
                throw ShapeError(strf("concat: shape mismatch %s vs %s",
                                      p.shape_string().c_str(),
                                      shape_str(out_shape).c_str()));
            }
        }
        total += p.shape()[ax];
    }
    out_shape[ax] = total;
    std::vector<int64_t> lens;
    lens.reserve(parts.size());
    for (const auto& p : parts) lens.push_back(p.shape()[ax]);

    auto forward = [ax, out_shape, lens](const std::vector<Tensor<S>>& ins) {
        Tensor<S> out = Tensor<S>::zeros(out_shape);
        int64_t inner = 1;
        for (size_t d = ax + 1; d < out_shape.size(); ++d) inner *= out_shape[d];
        int64_t outer = 1;
        for (int d = 0; d < ax; ++d) outer *= out_shape[d];
        const int64_t full = out_shape[ax];
        int64_t offset = 0;
        for (size_t k = 0; k < ins.size(); ++k) {
            const S* px = ins[k].data();
            const int64_t len = lens[k];
            for (int64_t o = 0; o < outer; ++o) {
                std::copy(px + o * len * inner, px + (o + 1) * len * inner,
                          out.data() + (o * full + offset) * inner);
            }
            offset += len;
        }
        return out;
    };
    Tensor<S> out = forward(parts);
    return detail::record_op_list<S>(
        "concat", std::move(out),
        [ax, lens](const Tensor<S>& g, const std::vector<Tensor<S>>&,
                   const Tensor<S>&) -> GradList<S> {
            GradList<S> grads;
            int64_t offset = 0;
            for (int64_t len : lens) {
                grads.emplace_back(slice(g, ax, offset, len));
                offset += len;
            }
            return grads;
        },
        forward, parts);
}

// ---------------------------------------------------------------------------
// reductions and their inverses
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
Tensor<S> sum_forward(const Tensor<S>& x, int ax, bool keepdim) {
    Shape out_shape = x.shape();
    const int64_t n = out_shape[ax];
    if (keepdim) {
        out_shape[ax] = 1;
    } else {
        out_shape.erase(out_shape.begin() + ax);
    }
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    int64_t inner = 1;
    for (int d = ax + 1; d < x.ndim(); ++d) inner *= x.shape()[d];
    int64_t outer = 1;
    for (int d = 0; d < ax; ++d) outer *= x.shape()[d];
    const S* px = x.data();
    S* po = out.data();
    for (int64_t o = 0; o < outer; ++o) {
        S* orow = po + o * inner;
        const S* xbase = px + o * n * inner;
        for (int64_t k = 0; k < n; ++k) {
            const S* xrow = xbase + k * inner;
            for (int64_t in = 0; in < inner; ++in) orow[in] += xrow[in];
        }
    }
    return out;
}

template <class S>
Tensor<S> expand_forward(const Tensor<S>& x, int ax, int64_t n, const Shape& out_shape) {
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    int64_t inner = 1;
    for (size_t d = ax + 1; d < out_shape.size(); ++d) inner *= out_shape[d];
    int64_t outer = 1;
    for (int d = 0; d < ax; ++d) outer *= out_shape[d];
    const S* px = x.data();
    S* po = out.data();
    for (int64_t o = 0; o < outer; ++o) {
        const S* src = px + o * inner;
        for (int64_t k = 0; k < n; ++k) {
            std::copy(src, src + inner, po + (o * n + k) * inner);
        }
    }
    return out;
}

}  // namespace detail

template <class S>
Tensor<S> sum(const Tensor<S>& a, int axis, bool keepdim) {
    const int ax = a.normalize_axis(axis);
    const int64_t n = a.shape()[ax];
    Tensor<S> out = detail::sum_forward(a, ax, keepdim);
    return detail::record_op<S>(
        "sum", std::move(out),
        [ax, n, keepdim](const Tensor<S>& g, const std::vector<Tensor<S>>&,
                         const Tensor<S>&) -> GradList<S> {
            return {expand_axis(g, ax, n, keepdim)};
        },
        [ax, keepdim](const std::vector<Tensor<S>>& ins) {
            return detail::sum_forward(ins[0], ax, keepdim);
        },
        a);
}

// Tiles along `axis`; if had_axis the axis already exists with size 1,
// otherwise a new axis is inserted. Linear, inverse pair of sum.
template <class S>
Tensor<S> expand_axis(const Tensor<S>& a, int axis, int64_t n, bool had_axis) {
    Shape out_shape = a.shape();
    int ax;
    if (had_axis) {
        ax = a.normalize_axis(axis);
        if (out_shape[ax] != 1) {
            throw ShapeError(strf("expand_axis: axis %d of %s must be 1", axis,
                                  a.shape_string().c_str()));
        }
        out_shape[ax] = n;
    } else {
        if (axis < 0 || axis > a.ndim()) {
            throw ShapeError(strf("expand_axis: insert position %d out of range", axis));
        }
        ax = axis;
        out_shape.insert(out_shape.begin() + axis, n);
    }
    Tensor<S> out = detail::expand_forward(a, ax, n, out_shape);
    return detail::record_op<S>(
        "expand-axis", std::move(out),
        [ax, had_axis](const Tensor<S>& g, const std::vector<Tensor<S>>&,
                       const Tensor<S>&) -> GradList<S> {
            return {sum(g, ax, had_axis)};
        },
        [ax, n, out_shape](const std::vector<Tensor<S>>& ins) {
            return detail::expand_forward(ins[0], ax, n, out_shape);
        },
        a);
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
    auto forward = [](const Tensor<S>& x) {
        S acc = S(0);
        for (S v : x.values()) acc += v;
        return Tensor<S>::scalar(acc);
    };
    Tensor<S> out = forward(a);
    return detail::record_op<S>(
        "sum-all", std::move(out),
        [](const Tensor<S>& g, const std::vector<Tensor<S>>& ins, const Tensor<S>&) -> GradList<S> {
            return {mul(ones<S>(ins[0].shape()), g)};
        },
        [forward](const std::vector<Tensor<S>>& ins) { return forward(ins[0]); },
        a);
}

template <class S>
Tensor<S> mean(const Tensor<S>& a, int axis, bool keepdim) {
    const int64_t n = a.shape()[a.normalize_axis(axis)];
    return mul_scalar(sum(a, axis, keepdim), 1.0 / static_cast<double>(n));
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
    return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

template <class S>
Tensor<S> max_over_axis(const Tensor<S>& a, int axis, bool keepdim) {
    const int ax = a.normalize_axis(axis);
    const int64_t n = a.shape()[ax];
    auto forward = [ax, keepdim](const Tensor<S>& x) {
        Shape out_shape = x.shape();
        const int64_t n = out_shape[ax];
        if (keepdim) {
            out_shape[ax] = 1;
        } else {
            out_shape.erase(out_shape.begin() + ax);
        }
        Tensor<S> out = Tensor<S>::zeros(out_shape);
        int64_t inner = 1;
        for (int d = ax + 1; d < x.ndim(); ++d) inner *= x.shape()[d];
        int64_t outer = 1;
        for (int d = 0; d < ax; ++d) outer *= x.shape()[d];
        const S* px = x.data();
        S* po = out.data();
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                S best = px[o * n * inner + in];
                for (int64_t k = 1; k < n; ++k) {
                    best = std::max(best, px[(o * n + k) * inner + in]);
                }
                po[o * inner + in] = best;
            }
        }
        return out;
    };
    Tensor<S> out = forward(a);
    return detail::record_op<S>(
        "max", std::move(out),
        [ax, n, keepdim](const Tensor<S>& g, const std::vector<Tensor<S>>& ins,
                         const Tensor<S>&) -> GradList<S> {
            // route to the first maximum along the axis (tie convention)
            const Tensor<S>& x = ins[0];
            Tensor<S> mask = Tensor<S>::zeros(x.shape());
            int64_t inner = 1;
            for (int d = ax + 1; d < x.ndim(); ++d) inner *= x.shape()[d];
            int64_t outer = 1;
            for (int d = 0; d < ax; ++d) outer *= x.shape()[d];
            const S* px = x.data();
            S* pm = mask.data();
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    int64_t arg = 0;
                    S best = px[o * n * inner + in];
                    for (int64_t k = 1; k < n; ++k) {
                        const S v = px[(o * n + k) * inner + in];
                        if (v > best) {
                            best = v;
                            arg = k;
                        }
                    }
                    pm[(o * n + arg) * inner + in] = S(1);
                }
            }
            return {mul(expand_axis(g, ax, n, keepdim), mask)};
        },
        [forward](const std::vector<Tensor<S>>& ins) { return forward(ins[0]); },
        a);
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

namespace detail {

// mask entries: 1 = attend, 0 = masked out (output exactly 0).
template <class S>
Tensor<S> softmax_last_forward(const Tensor<S>& x, const Tensor<S>* mask) {
    const int64_t n = x.shape().back();
    const int64_t rows = x.numel() / n;
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const S* px = x.data();
    S* po = out.data();
    const S* pm = mask ? mask->data() : nullptr;
    const int64_t mask_rows = mask ? mask->numel() / n : 0;
    for (int64_t r = 0; r < rows; ++r) {
        const S* row = px + r * n;
        S* orow = po + r * n;
        const S* mrow = pm ? pm + (r % mask_rows) * n : nullptr;
        double best = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < n; ++j) {
            if (mrow && mrow[j] == S(0)) continue;
            best = std::max(best, static_cast<double>(row[j]));
        }
        if (!std::isfinite(best)) {
            throw ValueError("softmax: row is fully masked or non-finite");
        }
        double denom = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            if (mrow && mrow[j] == S(0)) continue;
            denom += std::exp(static_cast<double>(row[j]) - best);
        }
        for (int64_t j = 0; j < n; ++j) {
            if (mrow && mrow[j] == S(0)) {
                orow[j] = S(0);
            } else {
                orow[j] = static_cast<S>(std::exp(static_cast<double>(row[j]) - best) / denom);
            }
        }
    }
    return out;
}

}  // namespace detail

// Softmax over the last axis. dx = y * (g - sum(g * y)), which is also valid
// at masked positions because y is exactly zero there.
template <class S>
Tensor<S> softmax_last(const Tensor<S>& a) {
    Tensor<S> out = detail::softmax_last_forward<S>(a, nullptr);
    return detail::record_op<S>(
        "softmax", std::move(out),
        [](const Tensor<S>& g, const std::vector<Tensor<S>>&, const Tensor<S>& y) -> GradList<S> {
            Tensor<S> gy = mul(g, y);
            Tensor<S> s = sum(gy, -1, true);
            return {mul(y, sub(g, s))};
        },
        [](const std::vector<Tensor<S>>& ins) {
            return detail::softmax_last_forward<S>(ins[0], nullptr);
        },
        a);
}

template <class S>
Tensor<S> softmax(const Tensor<S>& a, int axis) {
    const int ax = a.normalize_axis(axis);
    if (ax == a.ndim() - 1) return softmax_last(a);
    Tensor<S> t = transpose(a, ax, -1);
    return transpose(softmax_last(t), ax, -1);
}

// mask is a constant 0/1 tensor broadcast from a trailing suffix of a's
// shape; masked entries come out exactly 0 and rows renormalize over the
// surviving entries.
template <class S>
Tensor<S> masked_softmax(const Tensor<S>& a, const Tensor<S>& mask) {
    if (mask.ndim() > a.ndim() ||
        !std::equal(mask.shape().begin(), mask.shape().end(),
                    a.shape().end() - mask.ndim())) {
        throw ShapeError(strf("masked_softmax: mask %s is not a suffix of %s",
                              mask.shape_string().c_str(), a.shape_string().c_str()));
    }
    if (a.numel() % mask.numel() != 0 || mask.shape().back() != a.shape().back()) {
        throw ShapeError("masked_softmax: mask does not tile input rows");
    }
    Tensor<S> mask_c = mask.detached();
    Tensor<S> out = detail::softmax_last_forward<S>(a, &mask_c);
    return detail::record_op<S>(
        "masked-softmax", std::move(out),
        [](const Tensor<S>& g, const std::vector<Tensor<S>>&, const Tensor<S>& y) -> GradList<S> {
            Tensor<S> gy = mul(g, y);
            Tensor<S> s = sum(gy, -1, true);
            return {mul(y, sub(g, s))};
        },
        [mask_c](const std::vector<Tensor<S>>& ins) {
            return detail::softmax_last_forward<S>(ins[0], &mask_c);
        },
        a);
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void matmul_kernel(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
    // c[m,n] += a[m,k] @ b[k,n]; c zero-initialised by caller. ikj order keeps
    // the inner loop contiguous. Rows are independent, so the parallel version
    // is bit-identical to the serial one.
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) if (m * n * k > (1 << 16))
#endif
    for (int64_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            const S av = arow[kk];
            if (av == S(0)) continue;
            const S* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

template <class S>
Tensor<S> matmul_forward(const Tensor<S>& a, const Tensor<S>& b) {
    const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor<S> out = Tensor<S>::zeros({m, n});
    matmul_kernel(a.data(), b.data(), out.data(), m, k, n);
    return out;
}

template <class S>
Tensor<S> bmm_forward(const Tensor<S>& a, const Tensor<S>& b) {
    const int nd = a.ndim();
    const int64_t m = a.shape()[nd - 2], k = a.shape()[nd - 1], n = b.shape()[nd - 1];
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    const int64_t batches = a.numel() / (m * k);
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) if (batches > 1 && batches * m * n * k > (1 << 16))
#endif
    for (int64_t p = 0; p < batches; ++p) {
        matmul_kernel(a.data() + p * m * k, b.data() + p * k * n,
                      out.data() + p * m * n, m, k, n);
    }
    return out;
}

}  // namespace detail

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeError(strf("matmul: shape mismatch %s vs %s",
                              a.shape_string().c_str(), b.shape_string().c_str()));
    }
    Tensor<S> out = detail::matmul_forward(a, b);
    return detail::record_op<S>(
        "matmul", std::move(out),
        [](const Tensor<S>& g, const std::vector<Tensor<S>>& ins, const Tensor<S>&) -> GradList<S> {
            GradList<S> grads(2);
            if (Tape<S>::input_needed(0)) grads[0] = matmul(g, transpose(ins[1], 0, 1));
            if (Tape<S>::input_needed(1)) grads[1] = matmul(transpose(ins[0], 0, 1), g);
            return grads;
        },
        [](const std::vector<Tensor<S>>& ins) {
            return detail::matmul_forward(ins[0], ins[1]);
        },
        a, b);
}

template <class S>
Tensor<S> batched_matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.ndim() < 3 || b.ndim() != a.ndim() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()) ||
        a.shape().back() != b.shape()[b.ndim() - 2]) {
        throw ShapeError(strf("batched-matmul: shape mismatch %s vs %s",
                              a.shape_string().c_str(), b.shape_string().c_str()));
    }
    Tensor<S> out = detail::bmm_forward(a, b);
    return detail::record_op<S>(
        "batched-matmul", std::move(out),
        [](const Tensor<S>& g, const std::vector<Tensor<S>>& ins, const Tensor<S>&) -> GradList<S> {
            const int nd = ins[0].ndim();
            GradList<S> grads(2);
            if (Tape<S>::input_needed(0)) {
                grads[0] = batched_matmul(g, transpose(ins[1], nd - 1, nd - 2));
            }
            if (Tape<S>::input_needed(1)) {
                grads[1] = batched_matmul(transpose(ins[0], nd - 1, nd - 2), g);
            }
            return grads;
        },
        [](const std::vector<Tensor<S>>& ins) {
            return detail::bmm_forward(ins[0], ins[1]);
        },
        a, b);
}

// ---------------------------------------------------------------------------
// row gather / scatter (embedding lookups)
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> gather_rows(const Tensor<S>& table, const std::vector<int64_t>& ids) {
    if (table.ndim() != 2) {
        throw ShapeError(strf("gather-rows: table must be 2-D, got %s",
                              table.shape_string().c_str()));
    }
    const int64_t rows = table.shape()[0];
    for (int64_t id : ids) {
        if (id < 0 || id >= rows) {
            throw ValueError(strf("gather-rows: id %lld out of range [0,%lld)",
                                  static_cast<long long>(id),
                                  static_cast<long long>(rows)));
        }
    }
    auto forward = [ids](const Tensor<S>& t) {
        const int64_t d = t.shape()[1];
        Tensor<S> out = Tensor<S>::zeros({static_cast<int64_t>(ids.size()), d});
        for (size_t i = 0; i < ids.size(); ++i) {
            std::copy(t.data() + ids[i] * d, t.data() + (ids[i] + 1) * d,
                      out.data() + static_cast<int64_t>(i) * d);
        }
        return out;
    };
    Tensor<S> out = forward(table);
    return detail::record_op<S>(
        "gather-rows", std::move(out),
        [ids, rows](const Tensor<S>& g, const std::vector<Tensor<S>>&,
                    const Tensor<S>&) -> GradList<S> {
            return {scatter_rows(g, ids, rows)};
        },
        [forward](const std::vector<Tensor<S>>& ins) { return forward(ins[0]); },
        table);
}

template <class S>
Tensor<S> scatter_rows(const Tensor<S>& src, const std::vector<int64_t>& ids, int64_t rows) {
    if (src.ndim() != 2 || src.shape()[0] != static_cast<int64_t>(ids.size())) {
        throw ShapeError(strf("scatter-rows: src %s does not match %zu ids",
                              src.shape_string().c_str(), ids.size()));
    }
    auto forward = [ids, rows](const Tensor<S>& s) {
        const int64_t d = s.shape()[1];
        Tensor<S> out = Tensor<S>::zeros({rows, d});
        for (size_t i = 0; i < ids.size(); ++i) {
            const S* srow = s.data() + static_cast<int64_t>(i) * d;
            S* drow = out.data() + ids[i] * d;
            for (int64_t j = 0; j < d; ++j) drow[j] += srow[j];
        }
        return out;
    };
    Tensor<S> out = forward(src);
    return detail::record_op<S>(
        "scatter-rows", std::move(out),
        [ids](const Tensor<S>& g, const std::vector<Tensor<S>>&, const Tensor<S>&) -> GradList<S> {
            return {gather_rows(g, ids)};
        },
        [forward](const std::vector<Tensor<S>>& ins) { return forward(ins[0]); },
        src);
}

// ---------------------------------------------------------------------------
// composites (differentiable to any order through the primitives above)
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> silu(const Tensor<S>& a) {
    return mul(a, sigmoid(a));
}

template <class S>
Tensor<S> rms_normalize(const Tensor<S>& a, double eps = 1e-6) {
    Tensor<S> ms = mean(mul(a, a), -1, true);
    Tensor<S> inv = pow_scalar(add_scalar(ms, eps), -0.5);
    return mul(a, inv);
}

// Cosine similarity over the last axis; inputs of any matching shape, output
// drops the last axis.
template <class S>
Tensor<S> cosine_similarity(const Tensor<S>& a, const Tensor<S>& b) {
    require_same_shape(a, b, "cosine-similarity");
    Tensor<S> na2 = sum(mul(a, a), -1, false);
    Tensor<S> nb2 = sum(mul(b, b), -1, false);
    for (int64_t i = 0; i < na2.numel(); ++i) {
        if (na2.data()[i] == S(0) || nb2.data()[i] == S(0)) {
            throw ValueError("cosine-similarity: zero-norm input");
        }
    }
    Tensor<S> num = sum(mul(a, b), -1, false);
    return div(num, mul(sqrt(na2), sqrt(nb2)));
}

// ---------------------------------------------------------------------------
// operator sugar
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <class S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <class S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <class S>
Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }
template <class S>
Tensor<S> operator*(const Tensor<S>& a, double c) { return mul_scalar(a, c); }
template <class S>
Tensor<S> operator*(double c, const Tensor<S>& a) { return mul_scalar(a, c); }
template <class S>
Tensor<S> operator-(const Tensor<S>& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Tape::grad — here because it accumulates with add()
// ---------------------------------------------------------------------------

template <class S>
std::vector<Tensor<S>> Tape<S>::grad(const Tensor<S>& output,
                                     const std::vector<Tensor<S>>& wrt,
                                     bool create_graph) {
    if (output.numel() != 1) {
        throw ValueError(strf("grad: output is not scalar (shape %s)",
                              output.shape_string().c_str()));
    }
    if (!output.on_tape(serial_)) {
        throw ValueError("grad: output tensor not on tape");
    }
    for (const auto& w : wrt) {
        if (!w.on_tape(serial_)) {
            throw ValueError("grad: wrt tensor not on tape");
        }
    }
    if (create_graph && active() != this) {
        throw ValueError("grad: create_graph requires this tape to be active");
    }

    std::optional<PauseScope> pause;
    if (!create_graph) pause.emplace(this);

    const int64_t out_id = output.node();
    std::vector<Tensor<S>> acc(static_cast<size_t>(out_id) + 1);
    std::vector<char> has(static_cast<size_t>(out_id) + 1, 0);
    std::vector<char> keep(static_cast<size_t>(out_id) + 1, 0);
    for (const auto& w : wrt) {
        if (w.node() <= out_id) keep[w.node()] = 1;
    }
    acc[out_id] = Tensor<S>::scalar(S(1));
    has[out_id] = 1;

    // Prune the walk to nodes that can actually reach a wrt tensor; gradients
    // into other subgraphs would be discarded anyway. Every input id precedes
    // its node, so one forward pass settles reachability.
    std::vector<char> reach(static_cast<size_t>(out_id) + 1, 0);
    for (const auto& w : wrt) {
        if (w.node() <= out_id) reach[w.node()] = 1;
    }
    for (int64_t id = 0; id <= out_id; ++id) {
        if (reach[id]) continue;
        for (int64_t src : nodes_[id].in_ids) {
            if (src >= 0 && src <= out_id && reach[src]) {
                reach[id] = 1;
                break;
            }
        }
    }

    for (int64_t id = out_id; id >= 0; --id) {
        if (!has[id]) continue;
        if (!reach[id]) {
            if (!keep[id]) {
                acc[id] = Tensor<S>();
                has[id] = 0;
            }
            continue;
        }
        // copy handles up front: backward may append nodes and reallocate
        BackwardFn bwd = nodes_[id].bwd;
        if (!bwd) continue;
        std::vector<Tensor<S>> inputs = nodes_[id].inputs;
        std::vector<int64_t> in_ids = nodes_[id].in_ids;
        Tensor<S> out_val = nodes_[id].output;
        Tensor<S> g = acc[id];

        std::vector<char> needs(in_ids.size(), 0);
        for (size_t k = 0; k < in_ids.size(); ++k) {
            needs[k] = in_ids[k] >= 0 && reach[in_ids[k]] ? 1 : 0;
        }
        struct NeedsGuard {
            const std::vector<char>* prev;
            explicit NeedsGuard(const std::vector<char>* now) : prev(needs_slot()) {
                needs_slot() = now;
            }
            ~NeedsGuard() { needs_slot() = prev; }
        } needs_guard(&needs);
        GradList<S> gins = bwd(g, inputs, out_val);
        if (gins.size() != in_ids.size()) {
            throw Error(strf("grad: '%s' returned %zu gradients for %zu inputs",
                             nodes_[id].kind, gins.size(), in_ids.size()));
        }
        for (size_t k = 0; k < in_ids.size(); ++k) {
            const int64_t src = in_ids[k];
            if (src < 0 || !gins[k].has_value() || !reach[src]) continue;
            if (gins[k]->shape() != inputs[k].shape()) {
                throw Error(strf("grad: '%s' produced gradient %s for input %s",
                                 nodes_[id].kind, gins[k]->shape_string().c_str(),
                                 inputs[k].shape_string().c_str()));
            }
            if (has[src]) {
                acc[src] = add(acc[src], *gins[k]);
            } else {
                acc[src] = *gins[k];
                has[src] = 1;
            }
        }
        if (id != out_id && !keep[id]) {
            acc[id] = Tensor<S>();  // release intermediate gradient memory
            has[id] = 0;
        }
    }

    std::vector<Tensor<S>> result;
    result.reserve(wrt.size());
    for (const auto& w : wrt) {
        const int64_t id = w.node();
        if (id <= out_id && has[id]) {
            result.push_back(acc[id]);
        } else {
            result.push_back(Tensor<S>::zeros(w.shape()));
        }
    }
    return result;
}

// Convenience wrapper on the active tape; mirrors the library-level gradient
// entry point used by model code.
template <class S>
std::vector<Tensor<S>> grad(const Tensor<S>& output, const std::vector<Tensor<S>>& wrt,
                            bool create_graph = false) {
    auto* tape = Tape<S>::active();
    if (!tape) throw ValueError("grad: no active tape");
    return tape->grad(output, wrt, create_graph);
}

}  // namespace ebwm
