#include "loft/kernels.hpp"

#include <cmath>

namespace loft::kern {

// Row-times-vector dot product with a fixed 16-lane accumulator layout.
// The lane structure (stride-16 partial sums, combined in index order, then a
// scalar tail) is part of the numeric contract: it gives the compiler
// independent accumulators to vectorize without relaxed floating-point
// association, so results are identical across thread counts and runs.
template <typename T>
static T dot_row(const T* __restrict a, const T* __restrict b, int n) {
    constexpr int kLanes = 16;
    T lanes[kLanes] = {};
    int j = 0;
    for (; j + kLanes <= n; j += kLanes) {
        for (int k = 0; k < kLanes; ++k) lanes[k] += a[j + k] * b[j + k];
    }
    T acc{0};
    for (int k = 0; k < kLanes; ++k) acc += lanes[k];
    for (; j < n; ++j) acc += a[j] * b[j];
    return acc;
}

template <typename T>
void affine(const T* w, const T* b, const T* x, T* y, int d_out, int d_in) {
    for (int i = 0; i < d_out; ++i) {
        const T* row = w + static_cast<size_t>(i) * d_in;
        y[i] = dot_row(row, x, d_in) + (b ? b[i] : T{0});
    }
}

template <typename T>
void matvec_acc(const T* w, const T* x, T* y, int d_out, int d_in, T alpha) {
    for (int i = 0; i < d_out; ++i) {
        const T* row = w + static_cast<size_t>(i) * d_in;
        y[i] += alpha * dot_row(row, x, d_in);
    }
}

template <typename T>
void matvec_t_acc(const T* w, const T* dy, T* dx, int d_out, int d_in, T alpha) {
    for (int i = 0; i < d_out; ++i) {
        const T* row = w + static_cast<size_t>(i) * d_in;
        const T g = alpha * dy[i];
        for (int j = 0; j < d_in; ++j) dx[j] += row[j] * g;
    }
}

template <typename T>
void outer_acc(T* dw, T* db, const T* dy, const T* x, int d_out, int d_in) {
    for (int i = 0; i < d_out; ++i) {
        T* row = dw + static_cast<size_t>(i) * d_in;
        const T g = dy[i];
        for (int j = 0; j < d_in; ++j) row[j] += g * x[j];
        db[i] += g;
    }
}

template <typename T>
void scaled_outer_acc(T* dw, const T* dy, const T* x, int d_out, int d_in, T alpha) {
    for (int i = 0; i < d_out; ++i) {
        T* row = dw + static_cast<size_t>(i) * d_in;
        const T g = alpha * dy[i];
        for (int j = 0; j < d_in; ++j) row[j] += g * x[j];
    }
}

template <typename T>
void silu(const T* pre, T* post, int n) {
    for (int i = 0; i < n; ++i) {
        const T s = T{1} / (T{1} + std::exp(-pre[i]));
        post[i] = pre[i] * s;
    }
}

template <typename T>
void silu_backward(const T* pre, const T* dpost, T* dpre, int n) {
    for (int i = 0; i < n; ++i) {
        const T s = T{1} / (T{1} + std::exp(-pre[i]));
        dpre[i] = dpost[i] * (s * (T{1} + pre[i] * (T{1} - s)));
    }
}

template <typename T>
double mse(const T* a, const T* b, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(n);
}

template <typename T>
void mse_backward(const T* a, const T* b, T* da, size_t n) {
    const T scale = T{2} / static_cast<T>(n);
    for (size_t i = 0; i < n; ++i) da[i] = scale * (a[i] - b[i]);
}

template <typename T>
void axpy(T* y, const T* x, size_t n, T alpha) {
    for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template void affine<float>(const float*, const float*, const float*, float*, int, int);
template void affine<double>(const double*, const double*, const double*, double*, int, int);
template void matvec_acc<float>(const float*, const float*, float*, int, int, float);
template void matvec_acc<double>(const double*, const double*, double*, int, int, double);
template void matvec_t_acc<float>(const float*, const float*, float*, int, int, float);
template void matvec_t_acc<double>(const double*, const double*, double*, int, int, double);
template void outer_acc<float>(float*, float*, const float*, const float*, int, int);
template void outer_acc<double>(double*, double*, const double*, const double*, int, int);
template void scaled_outer_acc<float>(float*, const float*, const float*, int, int, float);
template void scaled_outer_acc<double>(double*, const double*, const double*, int, int, double);
template void silu<float>(const float*, float*, int);
template void silu<double>(const double*, double*, int);
template void silu_backward<float>(const float*, const float*, float*, int);
template void silu_backward<double>(const double*, const double*, double*, int);
template double mse<float>(const float*, const float*, size_t);
template double mse<double>(const double*, const double*, size_t);
template void mse_backward<float>(const float*, const float*, float*, size_t);
template void mse_backward<double>(const double*, const double*, double*, size_t);
template void axpy<float>(float*, const float*, size_t, float);
template void axpy<double>(double*, const double*, size_t, double);

}  // namespace loft::kern
