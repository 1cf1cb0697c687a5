#include "loft/nn.hpp"

#include <algorithm>
#include <cstring>

#include "loft/kernels.hpp"

namespace loft::nn {

using namespace loft::kern;

// ===========================================================================
// Chain plumbing
// ===========================================================================

template <typename T>
void ChainScratch<T>::prepare(const std::vector<ChainLayer<T>>& layers) {
    const size_t L = layers.size();
    x.resize(L + 1);
    pre.resize(L);
    u.resize(L);
    size_t max_d = 0;
    for (size_t l = 0; l < L; ++l) {
        x[l].assign(static_cast<size_t>(layers[l].d_in), T(0));
        pre[l].assign(static_cast<size_t>(layers[l].d_out), T(0));
        size_t ranks = 0;
        for (const auto& br : layers[l].branches) ranks += static_cast<size_t>(br.rank);
        u[l].assign(ranks, T(0));
        max_d = std::max(max_d, static_cast<size_t>(layers[l].d_out));
        max_d = std::max(max_d, static_cast<size_t>(layers[l].d_in));
        max_d = std::max(max_d, ranks);
    }
    x[L].assign(L ? static_cast<size_t>(layers[L - 1].d_out) : 0, T(0));
    dcur.assign(max_d, T(0));
    dnext.assign(max_d, T(0));
    du.assign(max_d, T(0));
}

template <typename T>
void check_chain(const std::vector<ChainLayer<T>>& layers, int input_dim) {
    if (layers.empty()) throw ShapeError("affine chain has no layers");
    int d = input_dim;
    for (const auto& l : layers) {
        if (l.d_in != d) {
            throw ShapeError("layer '" + l.name + "' expects input dim " +
                             std::to_string(l.d_in) + " but receives " + std::to_string(d));
        }
        for (const auto& br : l.branches) {
            if (br.rank <= 0) {
                throw ShapeError("layer '" + l.name + "' has a branch with non-positive rank");
            }
        }
        d = l.d_out;
    }
}

template <typename T>
void chain_forward(const std::vector<ChainLayer<T>>& layers, const T* input, ChainScratch<T>& s) {
    const size_t L = layers.size();
    std::memcpy(s.x[0].data(), input, s.x[0].size() * sizeof(T));
    for (size_t l = 0; l < L; ++l) {
        const auto& ly = layers[l];
        const T* xin = s.x[l].data();
        T* pre = s.pre[l].data();
        affine(ly.w, ly.b, xin, pre, ly.d_out, ly.d_in);
        size_t uoff = 0;
        for (const auto& br : ly.branches) {
            // Zero-weight branches contribute exactly nothing; skip them so a
            // degenerate fusion weight reproduces the unbranched bytes.
            if (br.weight == T(0)) {
                uoff += static_cast<size_t>(br.rank);
                continue;
            }
            T* uvec = s.u[l].data() + uoff;
            affine<T>(br.a_mat, nullptr, xin, uvec, br.rank, ly.d_in);
            matvec_acc(br.b_mat, uvec, pre, ly.d_out, br.rank, br.weight);
            uoff += static_cast<size_t>(br.rank);
        }
        T* xout = s.x[l + 1].data();
        if (ly.act) {
            silu(pre, xout, ly.d_out);
        } else {
            std::memcpy(xout, pre, static_cast<size_t>(ly.d_out) * sizeof(T));
        }
    }
}

template <typename T>
void chain_backward(const std::vector<ChainLayer<T>>& layers, ChainScratch<T>& s, const T* d_out,
                    std::vector<ChainGrad<T>>& grads, T* d_input) {
    const size_t L = layers.size();
    std::memcpy(s.dcur.data(), d_out, static_cast<size_t>(layers[L - 1].d_out) * sizeof(T));
    for (size_t li = L; li-- > 0;) {
        const auto& ly = layers[li];
        auto& g = grads[li];
        T* dpre = s.dcur.data();
        if (ly.act) {
            silu_backward(s.pre[li].data(), dpre, dpre, ly.d_out);
        }
        const T* xin = s.x[li].data();
        if (g.dw || g.db) {
            outer_acc(g.dw, g.db, dpre, xin, ly.d_out, ly.d_in);
        }
        const bool want_dx = (li > 0) || (d_input != nullptr);
        T* dx = s.dnext.data();
        if (want_dx) {
            std::memset(dx, 0, static_cast<size_t>(ly.d_in) * sizeof(T));
            matvec_t_acc(ly.w, dpre, dx, ly.d_out, ly.d_in, T(1));
        }
        size_t uoff = 0;
        for (size_t bi = 0; bi < ly.branches.size(); ++bi) {
            const auto& br = ly.branches[bi];
            const T* uvec = s.u[li].data() + uoff;
            uoff += static_cast<size_t>(br.rank);
            if (br.weight == T(0)) continue;
            typename ChainGrad<T>::BranchGrad* bg =
                bi < g.branches.size() ? &g.branches[bi] : nullptr;
            const bool want_grad = bg && (bg->db_mat || bg->da_mat);
            if (!want_grad && !want_dx) continue;
            if (want_grad && bg->db_mat) {
                scaled_outer_acc(bg->db_mat, dpre, uvec, ly.d_out, br.rank, br.weight);
            }
            T* duv = s.du.data();
            std::memset(duv, 0, static_cast<size_t>(br.rank) * sizeof(T));
            matvec_t_acc(br.b_mat, dpre, duv, ly.d_out, br.rank, br.weight);
            if (want_grad && bg->da_mat) {
                scaled_outer_acc(bg->da_mat, duv, xin, br.rank, ly.d_in, T(1));
            }
            if (want_dx) {
                matvec_t_acc(br.a_mat, duv, dx, br.rank, ly.d_in, T(1));
            }
        }
        if (want_dx) std::swap(s.dcur, s.dnext);
    }
    if (d_input) {
        std::memcpy(d_input, s.dcur.data(), static_cast<size_t>(layers[0].d_in) * sizeof(T));
    }
}

// ===========================================================================
// Flat-parameter MLP
// ===========================================================================

ParamLayout MlpSpec::layout() const {
    if (dims.size() < 2) throw ShapeError("network needs at least input and output dims");
    ParamLayout lay;
    for (int l = 0; l < layer_count(); ++l) {
        const std::string tag = std::to_string(l);
        lay.add("w" + tag, static_cast<size_t>(dims[l + 1]) * static_cast<size_t>(dims[l]));
        lay.add("b" + tag, static_cast<size_t>(dims[l + 1]));
    }
    return lay;
}

template <typename T>
std::vector<ChainLayer<T>> mlp_chain(const MlpSpec& spec, const T* params) {
    std::vector<ChainLayer<T>> layers;
    size_t off = 0;
    for (int l = 0; l < spec.layer_count(); ++l) {
        ChainLayer<T> ly;
        ly.name = "layer" + std::to_string(l);
        ly.d_in = spec.dims[l];
        ly.d_out = spec.dims[l + 1];
        ly.w = params + off;
        off += static_cast<size_t>(ly.d_out) * static_cast<size_t>(ly.d_in);
        ly.b = params + off;
        off += static_cast<size_t>(ly.d_out);
        ly.act = spec.hidden_act && l + 1 < spec.layer_count();
        layers.push_back(std::move(ly));
    }
    return layers;
}

template <typename T>
void mlp_forward(const MlpSpec& spec, const T* params, const T* input, T* out,
                 ChainScratch<T>& scratch) {
    auto layers = mlp_chain(spec, params);
    check_chain(layers, spec.dims[0]);
    scratch.prepare(layers);
    chain_forward(layers, input, scratch);
    std::memcpy(out, scratch.x.back().data(), scratch.x.back().size() * sizeof(T));
}

template <typename T>
double mlp_forward_backward_mse(const MlpSpec& spec, const T* params, const T* input,
                                const T* target, T* grads, ChainScratch<T>& scratch) {
    auto layers = mlp_chain(spec, params);
    check_chain(layers, spec.dims[0]);
    scratch.prepare(layers);
    chain_forward(layers, input, scratch);

    const int d_out = spec.dims.back();
    const T* y = scratch.x.back().data();
    const double loss = mse(y, target, d_out);

    std::vector<T> dy(static_cast<size_t>(d_out));
    mse_backward(y, target, dy.data(), d_out);

    const ParamLayout lay = spec.layout();
    std::vector<ChainGrad<T>> gs(layers.size());
    for (int l = 0; l < spec.layer_count(); ++l) {
        gs[static_cast<size_t>(l)].dw = grads + lay.find("w" + std::to_string(l)).offset;
        gs[static_cast<size_t>(l)].db = grads + lay.find("b" + std::to_string(l)).offset;
    }
    chain_backward(layers, scratch, dy.data(), gs, static_cast<T*>(nullptr));
    return loss;
}

// ===========================================================================
// Explicit instantiations
// ===========================================================================

template struct ChainScratch<float>;
template struct ChainScratch<double>;
template void check_chain<float>(const std::vector<ChainLayer<float>>&, int);
template void check_chain<double>(const std::vector<ChainLayer<double>>&, int);
template void chain_forward<float>(const std::vector<ChainLayer<float>>&, const float*,
                                   ChainScratch<float>&);
template void chain_forward<double>(const std::vector<ChainLayer<double>>&, const double*,
                                    ChainScratch<double>&);
template void chain_backward<float>(const std::vector<ChainLayer<float>>&, ChainScratch<float>&,
                                    const float*, std::vector<ChainGrad<float>>&, float*);
template void chain_backward<double>(const std::vector<ChainLayer<double>>&, ChainScratch<double>&,
                                     const double*, std::vector<ChainGrad<double>>&, double*);
template std::vector<ChainLayer<float>> mlp_chain<float>(const MlpSpec&, const float*);
template std::vector<ChainLayer<double>> mlp_chain<double>(const MlpSpec&, const double*);
template void mlp_forward<float>(const MlpSpec&, const float*, const float*, float*,
                                 ChainScratch<float>&);
template void mlp_forward<double>(const MlpSpec&, const double*, const double*, double*,
                                  ChainScratch<double>&);
template double mlp_forward_backward_mse<float>(const MlpSpec&, const float*, const float*,
                                                const float*, float*, ChainScratch<float>&);
template double mlp_forward_backward_mse<double>(const MlpSpec&, const double*, const double*,
                                                 const double*, double*, ChainScratch<double>&);

}  // namespace loft::nn
