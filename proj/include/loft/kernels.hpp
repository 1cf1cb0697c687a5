#pragma once

#include <cstddef>

namespace loft::kern {

// Dense affine/activation kernels shared by every network in the project.
// Defined once in kernels.cpp (explicit instantiation for float and double)
// so all call sites run the exact same object code; byte-level determinism
// guarantees depend on that.

// y = W x + b, W row-major d_out x d_in.
template <typename T>
void affine(const T* w, const T* b, const T* x, T* y, int d_out, int d_in);

// y += alpha * W x.
template <typename T>
void matvec_acc(const T* w, const T* x, T* y, int d_out, int d_in, T alpha);

// dx += alpha * W^T dy.
template <typename T>
void matvec_t_acc(const T* w, const T* dy, T* dx, int d_out, int d_in, T alpha);

// dW += dy x^T, db += dy.
template <typename T>
void outer_acc(T* dw, T* db, const T* dy, const T* x, int d_out, int d_in);

// dW += alpha * dy x^T (no bias term).
template <typename T>
void scaled_outer_acc(T* dw, const T* dy, const T* x, int d_out, int d_in, T alpha);

// SiLU x * sigmoid(x), elementwise over pre-activations.
template <typename T>
void silu(const T* pre, T* post, int n);

// dpre = dpost * silu'(pre).
template <typename T>
void silu_backward(const T* pre, const T* dpost, T* dpre, int n);

// Mean over all elements of (a - b)^2.
template <typename T>
double mse(const T* a, const T* b, size_t n);

// d/da of mse: 2 (a - b) / n.
template <typename T>
void mse_backward(const T* a, const T* b, T* da, size_t n);

template <typename T>
void axpy(T* y, const T* x, size_t n, T alpha);

}  // namespace loft::kern
