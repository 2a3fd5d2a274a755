#pragma once

// Dense row-major tensors and trainable parameters.
//
// Layout convention: image-like tensors are NHWC, i.e. [batch, rows, cols,
// channels], with the channel axis last. A cuboid is [10, 10, 3] where the
// last axis is time (three consecutive frames).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hvad/errors.hpp"

namespace hvad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    return os.str();
}

template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
        check_shape();
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (shape_size(shape_) != data_.size()) {
            throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                              " does not match shape " + shape_string(shape_));
        }
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    template <class... Idx>
    T& at(Idx... idx) {
        return data_[offset(idx...)];
    }
    template <class... Idx>
    const T& at(Idx... idx) const {
        return data_[offset(idx...)];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(T{}); }

    /// Reinterpret with a new shape of equal total size.
    void reshape(Shape shape) {
        if (shape_size(shape) != data_.size()) {
            throw ConfigError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        }
        shape_ = std::move(shape);
    }
    Tensor reshaped(Shape shape) const {
        Tensor out = *this;
        out.reshape(std::move(shape));
        return out;
    }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    /// Debug check for the finiteness invariant.
    void assert_finite(const std::string& what) const {
        if (!all_finite()) throw NumericError("non-finite value in " + what);
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void check_shape() const {
        for (std::size_t d : shape_) {
            if (d == 0) throw ConfigError("tensor dimensions must be positive, got " + shape_string(shape_));
        }
    }

    template <class... Idx>
    std::size_t offset(Idx... idx) const {
        const std::size_t index[] = {static_cast<std::size_t>(idx)...};
        std::size_t off = 0;
        for (std::size_t i = 0; i < sizeof...(Idx); ++i) off = off * shape_[i] + index[i];
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
};

template <class T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.size() != b.size()) throw ConfigError("dot: size mismatch");
    long double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<long double>(a[i]) * b[i];
    return static_cast<T>(acc);
}

/// A trainable tensor with its gradient and optimizer slots.
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    /// Optimizer-owned state, e.g. Adam first and second moments.
    std::vector<Tensor<T>> slots;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    const Shape& shape() const { return value.shape(); }
    void zero_grad() { grad.zero(); }
};

}  // namespace hvad
