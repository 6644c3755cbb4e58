#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "far/error.hpp"

namespace far {

// Dense n-dimensional array with row-major flat storage, channels-first
// layout for feature maps (c x h x w). Immutable by convention once handed
// to a tape; the struct itself is a plain value type.
template <typename T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> data;

    TensorT() = default;
    TensorT(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::size_t>(numel(shape)) != data.size()) {
            throw DimensionError("tensor: shape/data size mismatch");
        }
    }

    static long long numel(const std::vector<int>& s) {
        long long n = 1;
        for (int d : s) {
            if (d < 0) throw DimensionError("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    static TensorT zeros(std::vector<int> s) {
        auto n = numel(s);
        return TensorT(std::move(s), std::vector<T>(static_cast<std::size_t>(n), T(0)));
    }

    static TensorT full(std::vector<int> s, T v) {
        auto n = numel(s);
        return TensorT(std::move(s), std::vector<T>(static_cast<std::size_t>(n), v));
    }

    static TensorT scalar(T v) { return TensorT({1}, {v}); }

    int size() const { return static_cast<int>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    T item() const {
        if (data.size() != 1) throw ContractError("tensor: item() on non-scalar");
        return data[0];
    }

    // c x h x w indexing
    T& at3(int c, int i, int j) { return data[static_cast<std::size_t>((c * shape[1] + i) * shape[2] + j)]; }
    T at3(int c, int i, int j) const { return data[static_cast<std::size_t>((c * shape[1] + i) * shape[2] + j)]; }
    // m x n indexing
    T& at2(int i, int j) { return data[static_cast<std::size_t>(i * shape[1] + j)]; }
    T at2(int i, int j) const { return data[static_cast<std::size_t>(i * shape[1] + j)]; }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.data.reserve(data.size());
        for (T v : data) out.data.push_back(static_cast<U>(v));
        return out;
    }

    static std::string shape_str(const std::vector<int>& s) {
        std::string r = "[";
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) r += ",";
            r += std::to_string(s[i]);
        }
        return r + "]";
    }
};

using Tensor = TensorT<float>;

}  // namespace far
