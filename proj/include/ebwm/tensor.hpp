#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <numeric>
#include <sstream>
#include <type_traits>
#include <vector>

#include "ebwm/common.hpp"

namespace ebwm {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) {
            throw ShapeError(strf("negative dimension %lld", static_cast<long long>(d)));
        }
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

enum class Dtype : uint8_t { f32 = 4, f64 = 8 };

template <class S>
constexpr Dtype dtype_of() {
    static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>,
                  "tensors are f32 or f64");
    return std::is_same_v<S, float> ? Dtype::f32 : Dtype::f64;
}

inline const char* dtype_name(Dtype dt) {
    return dt == Dtype::f32 ? "f32" : "f64";
}

// Dense row-major tensor. The buffer is shared between views (reshape) and
// between a tensor and its tape record; operations never mutate buffers, so
// sharing is safe. Only the optimizer writes in place, on parameters it owns.
//
// A tensor is either a constant (node < 0) or lives on a tape identified by
// `tape_serial`; stale node ids from a destroyed tape are ignored because the
// serial will not match the active tape.
template <class S>
class Tensor {
public:
    Tensor() : shape_{}, data_(std::make_shared<std::vector<S>>(1, S(0))) {}

    Tensor(Shape shape, std::shared_ptr<std::vector<S>> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (numel_of(shape_) != static_cast<int64_t>(data_->size())) {
            throw ShapeError(strf("buffer of %zu values does not fill shape %s",
                                  data_->size(), shape_str(shape_).c_str()));
        }
    }

    static Tensor zeros(Shape shape) {
        const int64_t n = numel_of(shape);
        return Tensor(std::move(shape), std::make_shared<std::vector<S>>(n, S(0)));
    }

    static Tensor full(Shape shape, S value) {
        const int64_t n = numel_of(shape);
        return Tensor(std::move(shape), std::make_shared<std::vector<S>>(n, value));
    }

    static Tensor scalar(S value) {
        return full(Shape{}, value);
    }

    static Tensor from(Shape shape, std::vector<S> values) {
        return Tensor(std::move(shape), std::make_shared<std::vector<S>>(std::move(values)));
    }

    static Tensor randn(Shape shape, Rng& rng, double scale = 1.0) {
        const int64_t n = numel_of(shape);
        auto data = std::make_shared<std::vector<S>>(n);
        for (auto& v : *data) {
            v = static_cast<S>(rng.normal() * scale);
        }
        return Tensor(std::move(shape), std::move(data));
    }

    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(data_->size()); }

    int64_t dim(int axis) const {
        const int a = normalize_axis(axis);
        return shape_[a];
    }

    int normalize_axis(int axis) const {
        const int nd = ndim();
        int a = axis < 0 ? axis + nd : axis;
        if (a < 0 || a >= nd) {
            throw ShapeError(strf("axis %d out of range for shape %s", axis,
                                  shape_str(shape_).c_str()));
        }
        return a;
    }

    std::vector<S>& values() { return *data_; }
    const std::vector<S>& values() const { return *data_; }
    S* data() { return data_->data(); }
    const S* data() const { return data_->data(); }
    const std::shared_ptr<std::vector<S>>& buffer() const { return data_; }

    S item() const {
        if (numel() != 1) {
            throw ShapeError(strf("item() on non-scalar tensor %s",
                                  shape_str(shape_).c_str()));
        }
        return (*data_)[0];
    }

    bool all_finite() const {
        for (S v : *data_) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    int64_t node() const { return node_; }
    uint64_t tape_serial() const { return tape_serial_; }

    void bind_node(int64_t node, uint64_t tape_serial) {
        node_ = node;
        tape_serial_ = tape_serial;
    }

    bool on_tape(uint64_t tape_serial) const {
        return node_ >= 0 && tape_serial_ == tape_serial;
    }

    // Same buffer, no tape identity.
    Tensor detached() const {
        return Tensor(shape_, data_);
    }

    Tensor clone() const {
        return Tensor(shape_, std::make_shared<std::vector<S>>(*data_));
    }

    template <class T>
    Tensor<T> cast() const {
        auto data = std::make_shared<std::vector<T>>(data_->size());
        for (size_t i = 0; i < data_->size(); ++i) {
            (*data)[i] = static_cast<T>((*data_)[i]);
        }
        return Tensor<T>(shape_, std::move(data));
    }

    std::string shape_string() const { return shape_str(shape_); }

private:
    Shape shape_;
    std::shared_ptr<std::vector<S>> data_;
    int64_t node_ = -1;
    uint64_t tape_serial_ = 0;
};

template <class S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(strf("%s: shape mismatch %s vs %s", op,
                              a.shape_string().c_str(), b.shape_string().c_str()));
    }
}

template <class S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a.data()[i]) -
                                 static_cast<double>(b.data()[i])));
    }
    return m;
}

}  // namespace ebwm
