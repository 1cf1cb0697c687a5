#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "loft/data.hpp"
#include "loft/diffusion.hpp"
#include "loft/rng.hpp"

namespace loft::lora {

// ---------------------------------------------------------------------------
// Adapters: per-layer low-rank factor pairs on the denoiser's hidden layers.
// ---------------------------------------------------------------------------

struct LoraAdapter {
    uint64_t source_id = 0;   // id of the image (or image set) it was fit on
    uint32_t class_label = 0;
    int rank = 0;
    float scale = 1.0f;       // applied on top of fusion weights; fixed 1 here

    struct Layer {
        std::string name;
        int d_out = 0;
        int d_in = 0;
        std::vector<float> B;  // d_out x rank, zero at init
        std::vector<float> A;  // rank x d_in
    };
    std::vector<Layer> layers;

    void validate() const;
};

// Fresh adapter over the network's adaptation set (all hidden layers):
// B = 0 exactly, A ~ N(0, 1/d_in), so the adapted forward equals the base
// forward until training moves B.
LoraAdapter init_adapter(const diff::DenoiserArch& arch, int rank, uint32_t class_label,
                         uint64_t source_id, RngKey key);

// ---------------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------------

struct FusionSpec {
    std::vector<const LoraAdapter*> adapters;  // k >= 1, borrowed
    std::vector<double> weights;               // simplex weights, same length

    int k() const { return static_cast<int>(adapters.size()); }
    void validate() const;
};

// Branch overlay applying the fused adapters to every hidden layer; both
// guidance branches of the sampler then run through the same set.
diff::BranchOverlay make_overlay(const diff::DenoiserWeights& base, const FusionSpec& spec);

// One adapted layer evaluated branch-wise (never materializing the dense
// update): W h + b + sum_i w_i * scale * B_i (A_i h). The layer must belong
// to the adaptation set.
std::vector<float> fused_forward(const diff::DenoiserWeights& base, const std::string& layer_name,
                                 const FusionSpec& spec, std::span<const float> h_in);

// Dense update matrix sum_i w_i * scale * B_i A_i, computed in doubles; the
// testing oracle for the branch-wise path.
Tensor64 materialize_delta(const FusionSpec& spec, const std::string& layer_name);

// ---------------------------------------------------------------------------
// Fusion-weight sampling
// ---------------------------------------------------------------------------

struct LambdaSampler {
    enum class Kind { Fixed, Beta, Explicit };
    Kind kind = Kind::Fixed;
    double lambda = 0.5;       // Fixed: weights [lambda, 1-lambda]
    double alpha = 5.0;        // Beta(alpha, alpha) draw of lambda
    std::vector<double> vec;   // Explicit weight vector over k distinct adapters

    void validate() const;
    std::string describe() const;
};

// One Gamma(alpha, 1) draw (used for the symmetric Beta via two Gammas).
double gamma_draw(RngStream& st, double alpha);

// Picks adapters and weights for one generated image. Fixed/Beta pick an
// ordered pair of distinct adapters uniformly at random (weights [lambda,
// 1-lambda]); an explicit vector of length k picks k distinct adapters. When
// only one adapter exists the singleton spec w=[1] is returned.
FusionSpec sample_fusion(std::span<const LoraAdapter* const> adapters,
                         const LambdaSampler& sampler, RngKey key);

// ---------------------------------------------------------------------------
// Fine-tuning (base weights and embeddings stay frozen; only A/B move)
// ---------------------------------------------------------------------------

struct FinetuneConfig {
    int rank = 2;
    long steps = 300;
    double lr = 1e-3;
    double warmup_frac = 0.1;
    double weight_decay = 0.0;
};

LoraAdapter finetune_class_set(const diff::DenoiserWeights& base,
                               std::span<const data::Item> images, int label,
                               const FinetuneConfig& cfg, RngKey key,
                               std::vector<double>* trace = nullptr);

LoraAdapter finetune_single_image(const diff::DenoiserWeights& base, const data::Item& image,
                                  int label, const FinetuneConfig& cfg, RngKey key,
                                  std::vector<double>* trace = nullptr);

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

void save_adapter(const std::filesystem::path& path, const LoraAdapter& a);
LoraAdapter load_adapter(const std::filesystem::path& path);

}  // namespace loft::lora
