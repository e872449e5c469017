#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "duel/errors.hpp"

namespace duel {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Buffers start on a SIMD boundary so vectorized kernels see the same
/// alignment for a given shape on every run.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense row-major array. Value semantics; copying copies the buffer.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}
    Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end())) {}
    Tensor(Shape shape, Buffer<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        require(static_cast<std::int64_t>(data_.size()) == shape_numel(shape_), ErrorKind::shape,
                "buffer of " + std::to_string(data_.size()) + " values does not fill shape " +
                    shape_str(shape_));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::int64_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::int64_t numel() const noexcept { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> span() noexcept { return data_; }
    std::span<const T> span() const noexcept { return data_; }
    Buffer<T>& vec() noexcept { return data_; }
    const Buffer<T>& vec() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& at(std::int64_t i, std::int64_t j) { return data_[i * shape_[1] + j]; }
    const T& at(std::int64_t i, std::int64_t j) const { return data_[i * shape_[1] + j]; }
    T& at(std::int64_t i, std::int64_t j, std::int64_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    const T& at(std::int64_t i, std::int64_t j, std::int64_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    T& at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    const T& at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) const {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape shape) const& {
        require(shape_numel(shape) == numel(), ErrorKind::shape,
                "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        return Tensor(std::move(shape), data_);
    }
    Tensor reshaped(Shape shape) && {
        require(shape_numel(shape) == numel(), ErrorKind::shape,
                "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        return Tensor(std::move(shape), std::move(data_));
    }

    template <typename U>
    Tensor<U> cast() const {
        Buffer<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    /// Contiguous block along the leading axis.
    Tensor slice0(std::int64_t begin, std::int64_t end) const {
        require(rank() >= 1 && 0 <= begin && begin <= end && end <= shape_[0], ErrorKind::shape,
                "slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                    shape_str(shape_));
        Shape s = shape_;
        s[0] = end - begin;
        const std::int64_t inner = shape_[0] ? numel() / shape_[0] : 0;
        return Tensor(s, Buffer<T>(data_.begin() + begin * inner, data_.begin() + end * inner));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    Buffer<T> data_;
};

template <typename T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
    require(!parts.empty(), ErrorKind::shape, "concat of zero tensors");
    Shape s = parts.front().shape();
    std::int64_t lead = 0;
    Buffer<T> out;
    for (const auto& p : parts) {
        require(p.rank() == s.size() && std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1),
                ErrorKind::shape, "concat0 shape mismatch " + shape_str(p.shape()));
        lead += p.dim(0);
        out.insert(out.end(), p.vec().begin(), p.vec().end());
    }
    s[0] = lead;
    return Tensor<T>(s, std::move(out));
}

}  // namespace duel
