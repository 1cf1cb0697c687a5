#include "loft/optim.hpp"

#include <cmath>
#include <string>

#include "loft/errors.hpp"

namespace loft::optim {

template <typename T>
void adamw_step(T* params, const T* grads, AdamWState<T>& state, const AdamWConfig& cfg,
                double lr_now, const nn::ParamLayout* layout) {
    const size_t n = state.size();
    state.step += 1;
    const double b1 = cfg.beta1;
    const double b2 = cfg.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (size_t i = 0; i < n; ++i) {
        const double g = static_cast<double>(grads[i]);
        if (!std::isfinite(g)) {
            std::string where = "index " + std::to_string(i);
            if (layout) where = "'" + layout->segment_at(i).name + "' (" + where + ")";
            throw DivergenceError("non-finite gradient in " + where);
        }
        const double m = b1 * static_cast<double>(state.m[i]) + (1.0 - b1) * g;
        const double v = b2 * static_cast<double>(state.v[i]) + (1.0 - b2) * g * g;
        state.m[i] = static_cast<T>(m);
        state.v[i] = static_cast<T>(v);
        const double m_hat = m / bc1;
        const double v_hat = v / bc2;
        const double theta = static_cast<double>(params[i]);
        const double upd = m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * theta;
        params[i] = static_cast<T>(theta - lr_now * upd);
    }
}

double cosine_lr(long step, long total, long warmup, double base) {
    if (total <= 0) return 0.0;
    if (step < 0) step = 0;
    if (step >= total) return 0.0;
    if (warmup > 0 && step < warmup) {
        return base * static_cast<double>(step) / static_cast<double>(warmup);
    }
    const double span = static_cast<double>(total - warmup);
    const double progress =
        span > 0.0 ? static_cast<double>(step - warmup) / span : 1.0;
    return base * 0.5 * (1.0 + std::cos(M_PI * progress));
}

template struct AdamWState<float>;
template struct AdamWState<double>;
template void adamw_step<float>(float*, const float*, AdamWState<float>&, const AdamWConfig&,
                                double, const nn::ParamLayout*);
template void adamw_step<double>(double*, const double*, AdamWState<double>&, const AdamWConfig&,
                                 double, const nn::ParamLayout*);

}  // namespace loft::optim
