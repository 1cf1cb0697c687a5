#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "loft/errors.hpp"

namespace loft {

// Dense row-major tensor. float is the working precision; TensorT<double>
// exists for gradient verification.
template <typename T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> data;

    TensorT() = default;
    explicit TensorT(std::vector<int> s, T fill = T{0}) : shape(std::move(s)) {
        data.assign(numel_of(shape), fill);
    }
    TensorT(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel_of(shape)) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape product " + std::to_string(numel_of(shape)));
        }
    }

    static size_t numel_of(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) {
            if (d < 0) throw ShapeError("negative dimension in tensor shape");
            n *= static_cast<size_t>(d);
        }
        return n;
    }

    size_t numel() const { return data.size(); }

    bool all_finite() const {
        for (T v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

inline std::vector<double> widen(const std::vector<float>& v) {
    return std::vector<double>(v.begin(), v.end());
}

inline std::vector<float> narrow(const std::vector<double>& v) {
    return std::vector<float>(v.begin(), v.end());
}

}  // namespace loft
