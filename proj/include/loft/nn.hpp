#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "loft/errors.hpp"

namespace loft::nn {

// Named segments inside one flat parameter vector. Declaration order is the
// serialization order for checkpoints.
struct ParamLayout {
    struct Segment {
        std::string name;
        size_t offset;
        size_t size;
    };
    std::vector<Segment> segments;
    size_t total = 0;

    size_t add(const std::string& name, size_t size) {
        segments.push_back({name, total, size});
        total += size;
        return segments.back().offset;
    }
    const Segment& find(const std::string& name) const {
        for (const auto& s : segments) {
            if (s.name == name) return s;
        }
        throw ShapeError("no parameter segment named '" + name + "'");
    }
    // Which segment a flat index falls into; used to name bad parameters.
    const Segment& segment_at(size_t flat_index) const {
        for (const auto& s : segments) {
            if (flat_index >= s.offset && flat_index < s.offset + s.size) return s;
        }
        throw ShapeError("flat index out of range for parameter layout");
    }
};

// One affine layer viewed through pointers into externally owned storage,
// plus any low-rank branches fused into it: y = W x + b + sum_i w_i B_i (A_i x).
template <typename T>
struct ChainLayer {
    std::string name;
    const T* w = nullptr;
    const T* b = nullptr;
    int d_in = 0;
    int d_out = 0;
    bool act = false;  // SiLU applied after this layer

    struct Branch {
        const T* b_mat;  // d_out x rank
        const T* a_mat;  // rank x d_in
        int rank;
        T weight;        // fusion weight times adapter scale
    };
    std::vector<Branch> branches;
};

// Gradient sinks matching a ChainLayer; null pointers mean "not requested".
template <typename T>
struct ChainGrad {
    T* dw = nullptr;
    T* db = nullptr;
    struct BranchGrad {
        T* db_mat = nullptr;
        T* da_mat = nullptr;
    };
    std::vector<BranchGrad> branches;
};

// Cached activations for one forward pass; reusable across items.
template <typename T>
struct ChainScratch {
    std::vector<std::vector<T>> x;    // x[l] = input of layer l; x[L] = output
    std::vector<std::vector<T>> pre;  // pre-activation per layer
    std::vector<std::vector<T>> u;    // concatenated branch intermediates per layer
    std::vector<T> dcur, dnext, du;

    void prepare(const std::vector<ChainLayer<T>>& layers);
};

template <typename T>
void check_chain(const std::vector<ChainLayer<T>>& layers, int input_dim);

// Forward through the chain; output lands in s.x.back().
template <typename T>
void chain_forward(const std::vector<ChainLayer<T>>& layers, const T* input, ChainScratch<T>& s);

// Backward from d_out (gradient at chain output). Accumulates into the
// requested grad sinks; d_input (optional) receives the input gradient.
template <typename T>
void chain_backward(const std::vector<ChainLayer<T>>& layers, ChainScratch<T>& s, const T* d_out,
                    std::vector<ChainGrad<T>>& grads, T* d_input);

// ---------------------------------------------------------------------------
// Plain MLP on a flat parameter vector: the network type behind the generic
// forward/backward operation and the downstream classifiers.
// ---------------------------------------------------------------------------

struct MlpSpec {
    std::vector<int> dims;   // dims[0] = input, dims.back() = output
    bool hidden_act = true;  // SiLU between layers (never after the last)

    int layer_count() const { return static_cast<int>(dims.size()) - 1; }
    ParamLayout layout() const;
    size_t param_count() const { return layout().total; }
};

template <typename T>
std::vector<ChainLayer<T>> mlp_chain(const MlpSpec& spec, const T* params);

template <typename T>
void mlp_forward(const MlpSpec& spec, const T* params, const T* input, T* out,
                 ChainScratch<T>& scratch);

// Loss = mean squared error between network output and target; gradients for
// every parameter land in `grads` (flat, same layout as params).
template <typename T>
double mlp_forward_backward_mse(const MlpSpec& spec, const T* params, const T* input,
                                const T* target, T* grads, ChainScratch<T>& scratch);

}  // namespace loft::nn
