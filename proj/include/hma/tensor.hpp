#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "hma/error.hpp"

namespace hma {

enum class DType : std::uint32_t { f32 = 0, f64 = 1, u8 = 2 };

template <class T>
struct dtype_of;
template <>
struct dtype_of<float> {
    static constexpr DType value = DType::f32;
};
template <>
struct dtype_of<double> {
    static constexpr DType value = DType::f64;
};
template <>
struct dtype_of<std::uint8_t> {
    static constexpr DType value = DType::u8;
};

inline const char* dtype_name(DType d) {
    switch (d) {
        case DType::f32: return "f32";
        case DType::f64: return "f64";
        case DType::u8: return "u8";
    }
    return "?";
}

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of rank 1..4. Rank-4 tensors are laid out as
/// batch, channel, height, width.
template <class T>
class Tensor {
public:
    using value_type = T;
    static constexpr DType dtype = dtype_of<T>::value;

    Tensor() = default;

    explicit Tensor(Shape dims, T fill = T{}) : dims_(std::move(dims)) {
        check_dims();
        data_.assign(shape_numel(dims_), fill);
    }

    Tensor(Shape dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
        check_dims();
        if (data_.size() != shape_numel(dims_))
            throw ShapeError("data length " + std::to_string(data_.size()) + " does not match dims " +
                             shape_str(dims_));
    }

    static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

    const Shape& dims() const noexcept { return dims_; }
    std::size_t rank() const noexcept { return dims_.size(); }
    std::size_t dim(std::size_t i) const { return dims_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::size_t i, std::size_t j) { return data_[i * dims_[1] + j]; }
    const T& at(std::size_t i, std::size_t j) const { return data_[i * dims_[1] + j]; }
    T& at(std::size_t i, std::size_t j, std::size_t k) { return data_[(i * dims_[1] + j) * dims_[2] + k]; }
    const T& at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * dims_[1] + j) * dims_[2] + k];
    }
    T& at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
        return data_[((b * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
    }
    const T& at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
        return data_[((b * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
    }

    /// Same data, new extents. Element count must be preserved.
    Tensor reshaped(Shape dims) const {
        if (shape_numel(dims) != data_.size())
            throw ShapeError("cannot reshape " + shape_str(dims_) + " to " + shape_str(dims));
        return Tensor(std::move(dims), data_);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(dims_, std::move(out));
    }

    bool all_finite() const {
        if constexpr (std::is_floating_point_v<T>) {
            return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
        } else {
            return true;
        }
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.dims_ == b.dims_ && a.data_ == b.data_;
    }

private:
    void check_dims() const {
        if (dims_.empty() || dims_.size() > 4)
            throw ShapeError("tensor rank must be 1..4, got " + std::to_string(dims_.size()));
        for (auto d : dims_)
            if (d == 0) throw ShapeError("tensor extents must be positive: " + shape_str(dims_));
    }

    Shape dims_;
    std::vector<T> data_;
};

using LabelMap = Tensor<std::uint8_t>;

template <class T>
void require_same_dims(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.dims() != b.dims())
        throw ShapeError(std::string(op) + ": dims " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
}

template <class T>
void require_rank(const Tensor<T>& a, std::size_t rank, const char* op) {
    if (a.rank() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.dims()));
}

/// Neumaier-compensated running sum; long reductions stay accurate to a
/// few ulp regardless of length and order.
template <class T>
class CompensatedSum {
public:
    void add(T v) {
        const T t = sum_ + v;
        if (std::abs(sum_) >= std::abs(v))
            carry_ += (sum_ - t) + v;
        else
            carry_ += (v - t) + sum_;
        sum_ = t;
    }
    CompensatedSum& operator+=(T v) {
        add(v);
        return *this;
    }
    T value() const { return sum_ + carry_; }

private:
    T sum_ = 0;
    T carry_ = 0;
};

}  // namespace hma
