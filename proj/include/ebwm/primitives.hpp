#pragma once

#include <map>
#include <string>
#include <vector>

#include "ebwm/ops.hpp"

namespace ebwm {

// Attribute bag for the string-dispatched primitive surface. Typed call sites
// use the free functions in ops.hpp directly; this exists for generic code
// (per-primitive test sweeps, tracing).
struct Attrs {
    std::map<std::string, double> nums;
    std::map<std::string, std::vector<int64_t>> int_lists;

    bool has_num(const std::string& k) const { return nums.count(k) != 0; }
    double num(const std::string& k) const {
        auto it = nums.find(k);
        if (it == nums.end()) throw ConfigError("missing attribute '" + k + "'");
        return it->second;
    }
    double num_or(const std::string& k, double fallback) const {
        auto it = nums.find(k);
        return it == nums.end() ? fallback : it->second;
    }
    const std::vector<int64_t>& ints(const std::string& k) const {
        auto it = int_lists.find(k);
        if (it == int_lists.end()) throw ConfigError("missing attribute '" + k + "'");
        return it->second;
    }
};

template <class S>
Tensor<S> apply_primitive(const std::string& kind, const std::vector<Tensor<S>>& inputs,
                          const Attrs& attrs = {}) {
    auto one = [&]() -> const Tensor<S>& {
        if (inputs.size() != 1) {
            throw ShapeError(strf("%s expects 1 input, got %zu", kind.c_str(), inputs.size()));
        }
        return inputs[0];
    };
    auto two = [&]() {
        if (inputs.size() != 2) {
            throw ShapeError(strf("%s expects 2 inputs, got %zu", kind.c_str(), inputs.size()));
        }
    };

    if (kind == "add") { two(); return add(inputs[0], inputs[1]); }
    if (kind == "sub") { two(); return sub(inputs[0], inputs[1]); }
    if (kind == "mul") { two(); return mul(inputs[0], inputs[1]); }
    if (kind == "div") { two(); return div(inputs[0], inputs[1]); }
    if (kind == "neg") return neg(one());
    if (kind == "add-scalar") return add_scalar(one(), attrs.num("value"));
    if (kind == "mul-scalar") return mul_scalar(one(), attrs.num("value"));
    if (kind == "exp") return exp(one());
    if (kind == "log") return log(one());
    if (kind == "sqrt") return sqrt(one());
    if (kind == "power") return pow_scalar(one(), attrs.num("exponent"));
    if (kind == "abs") return abs(one());
    if (kind == "sigmoid") return sigmoid(one());
    if (kind == "silu") return silu(one());
    if (kind == "clamp") {
        return clamp(one(), attrs.num_or("lo", -std::numeric_limits<double>::infinity()),
                     attrs.num_or("hi", std::numeric_limits<double>::infinity()));
    }
    if (kind == "sum") {
        if (!attrs.has_num("axis")) return sum_all(one());
        return sum(one(), static_cast<int>(attrs.num("axis")), attrs.num_or("keepdim", 0) != 0);
    }
    if (kind == "mean") {
        if (!attrs.has_num("axis")) return mean_all(one());
        return mean(one(), static_cast<int>(attrs.num("axis")), attrs.num_or("keepdim", 0) != 0);
    }
    if (kind == "max") {
        return max_over_axis(one(), static_cast<int>(attrs.num("axis")),
                             attrs.num_or("keepdim", 0) != 0);
    }
    if (kind == "softmax") return softmax(one(), static_cast<int>(attrs.num_or("axis", -1)));
    if (kind == "masked-softmax") { two(); return masked_softmax(inputs[0], inputs[1]); }
    if (kind == "matmul") { two(); return matmul(inputs[0], inputs[1]); }
    if (kind == "batched-matmul") { two(); return batched_matmul(inputs[0], inputs[1]); }
    if (kind == "transpose") {
        return transpose(one(), static_cast<int>(attrs.num("axis0")),
                         static_cast<int>(attrs.num("axis1")));
    }
    if (kind == "reshape") {
        return reshape(one(), Shape(attrs.ints("dims").begin(), attrs.ints("dims").end()));
    }
    if (kind == "slice") {
        return slice(one(), static_cast<int>(attrs.num("axis")),
                     static_cast<int64_t>(attrs.num("start")),
                     static_cast<int64_t>(attrs.num("len")));
    }
    if (kind == "concat") return concat(inputs, static_cast<int>(attrs.num("axis")));
    if (kind == "expand-axis") {
        return expand_axis(one(), static_cast<int>(attrs.num("axis")),
                           static_cast<int64_t>(attrs.num("n")),
                           attrs.num_or("had_axis", 1) != 0);
    }
    if (kind == "gather-rows") return gather_rows(one(), attrs.ints("ids"));
    if (kind == "scatter-rows") {
        return scatter_rows(one(), attrs.ints("ids"),
                            static_cast<int64_t>(attrs.num("rows")));
    }
    if (kind == "rms-normalize") return rms_normalize(one(), attrs.num_or("eps", 1e-6));
    if (kind == "cosine-similarity") { two(); return cosine_similarity(inputs[0], inputs[1]); }

    throw ConfigError("unknown primitive kind '" + kind + "'");
}

inline const std::vector<std::string>& primitive_kinds() {
    static const std::vector<std::string> kinds = {
        "add", "sub", "mul", "div", "neg", "add-scalar", "mul-scalar", "exp",
        "log", "sqrt", "power", "abs", "sigmoid", "silu", "clamp", "sum",
        "mean", "max", "softmax", "masked-softmax", "matmul", "batched-matmul",
        "transpose", "reshape", "slice", "concat", "expand-axis", "gather-rows",
        "scatter-rows", "rms-normalize", "cosine-similarity"};
    return kinds;
}

}  // namespace ebwm
