#pragma once

#include <cstddef>
#include <vector>

#include "loft/nn.hpp"

namespace loft::optim {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// First/second moment buffers for one flat parameter vector.
template <typename T>
struct AdamWState {
    std::vector<T> m, v;
    long step = 0;

    explicit AdamWState(size_t n) : m(n, T(0)), v(n, T(0)) {}
    size_t size() const { return m.size(); }
};

// One update with decoupled weight decay:
//   theta' = theta - lr * ( m_hat / (sqrt(v_hat) + eps) + wd * theta )
// Non-finite gradients abort with an error naming the parameter segment when
// a layout is supplied.
template <typename T>
void adamw_step(T* params, const T* grads, AdamWState<T>& state, const AdamWConfig& cfg,
                double lr_now, const nn::ParamLayout* layout = nullptr);

// Cosine decay from `base` to zero over `total` steps with a linear warmup
// over the first `warmup` steps. Steps at or past `total` return zero.
double cosine_lr(long step, long total, long warmup, double base);

}  // namespace loft::optim
