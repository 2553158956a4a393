#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <vector>

#include "common.hpp"
#include "random.hpp"

namespace brasyn {

// Dense row-major N-d array. Always contiguous; the last axis is fastest.
template <class T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
    Tensor(Shape shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        BRASYN_CHECK(data_.size() == shape_numel(shape_),
                     "tensor: data size ", data_.size(),
                     " does not match shape ", shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }

    static Tensor randn(Shape shape, Rng& rng, T std = T(1), T mean = T(0)) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = mean + std * T(rng.normal());
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_[i]; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    template <class... Ix>
    T& at(Ix... ix) { return data_[offset(ix...)]; }
    template <class... Ix>
    const T& at(Ix... ix) const { return data_[offset(ix...)]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    // Same data, new shape (element count must match).
    Tensor reshaped(Shape shape) const {
        BRASYN_CHECK(shape_numel(shape) == data_.size(),
                     "reshape: ", shape_str(shape_), " -> ", shape_str(shape),
                     " changes element count");
        return Tensor(std::move(shape), data_);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    T min() const {
        BRASYN_CHECK(!data_.empty(), "min of empty tensor");
        return *std::min_element(data_.begin(), data_.end());
    }
    T max() const {
        BRASYN_CHECK(!data_.empty(), "max of empty tensor");
        return *std::max_element(data_.begin(), data_.end());
    }
    double sum() const {
        double s = 0;
        for (const T& v : data_) s += double(v);
        return s;
    }
    double mean() const { return data_.empty() ? 0.0 : sum() / double(data_.size()); }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = U(data_[i]);
        return out;
    }

private:
    template <class... Ix>
    std::size_t offset(Ix... ix) const {
        const std::size_t idx[] = {std::size_t(ix)...};
        std::size_t off = 0;
        for (std::size_t a = 0; a < sizeof...(Ix); ++a)
            off = off * shape_[a] + idx[a];
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
};

} // namespace brasyn
