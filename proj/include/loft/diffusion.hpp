#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "loft/data.hpp"
#include "loft/nn.hpp"
#include "loft/rng.hpp"
#include "loft/tensor.hpp"

namespace loft::diff {

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;       // beta[t-1] for t in 1..T
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // running product of alpha
};

// Linear beta ramp from beta_start to beta_end over T steps.
NoiseSchedule make_schedule(int T, double beta_start, double beta_end);

// z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps
void q_sample(std::span<const float> z0, int t, std::span<const float> eps,
              const NoiseSchedule& sched, std::span<float> z_t);

// ---------------------------------------------------------------------------
// Denoiser: MLP on flattened pixels with additive class + time embeddings.
// Hidden layers are the adaptation surface for low-rank branches.
// ---------------------------------------------------------------------------

struct DenoiserArch {
    int image_hw = 16;      // square image side
    int n_classes = 6;      // embedding table has n_classes + 1 rows (last = null token)
    int width = 256;        // hidden width; also equals flattened input dim by default
    int n_hidden = 3;
    int time_features = 32; // sinusoidal feature count (projected to input dim)
    int T = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    int input_dim() const { return image_hw * image_hw; }
    int null_token() const { return n_classes; }
    std::vector<std::string> hidden_layer_names() const;
    nn::ParamLayout layout() const;
    NoiseSchedule schedule() const { return make_schedule(T, beta_start, beta_end); }
    std::string to_json() const;
    static DenoiserArch from_json(const std::string& text);
    bool operator==(const DenoiserArch&) const = default;
};

struct DenoiserWeights {
    DenoiserArch arch;
    nn::ParamLayout layout;     // cached arch.layout()
    std::vector<float> params;  // flat, in layout order
};

DenoiserWeights init_denoiser(const DenoiserArch& arch, RngKey key);
uint64_t weights_hash(const DenoiserWeights& w);

// Low-rank branches attached to the hidden layers during an evaluation.
// per_hidden[i] holds the branches fused into hidden layer i.
struct BranchOverlay {
    std::vector<std::vector<nn::ChainLayer<float>::Branch>> per_hidden;
};

// View of the denoiser as an affine chain (borrowing weight storage).
std::vector<nn::ChainLayer<float>> build_chain(const DenoiserWeights& w,
                                               const BranchOverlay* overlay);

// Sinusoidal timestep features (half sine, half cosine, geometric frequencies).
void time_features(int t, int n, float* out);

struct DenoiseScratch {
    std::vector<float> x_in, feat, time_emb;
    nn::ChainScratch<float> chain;
};

// One denoiser evaluation: eps_out = eps_theta(z_t, token, t). The chain must
// come from build_chain on the same weights.
void denoise(const DenoiserWeights& w, const std::vector<nn::ChainLayer<float>>& chain,
             const float* z_t, int t, int token, float* eps_out, DenoiseScratch& s);

// ---------------------------------------------------------------------------
// Training objective
// ---------------------------------------------------------------------------

// Per-item draws for the objective, in pinned order (t, dropout, eps) so the
// value-only and gradient paths see identical randomness.
void draw_item_noise(RngKey item_key, const NoiseSchedule& sched, double p_uncond, int label,
                     int null_token, std::span<float> eps, int& t_out, int& token_out);

struct LossItem {
    const float* pixels;  // input_dim floats in [0,1]
    int label;            // in [0, n_classes)
};

// Arbitrary denoiser evaluator, used to pin the objective against stubs.
using DenoiseFn = std::function<void(const float* z_t, int t, int token, float* eps_out)>;

// Mean over items of mean-squared noise prediction error; no gradients.
// used_tokens (optional) records the conditioning token per item after dropout.
double diffusion_loss_value(const DenoiseFn& fn, int input_dim, std::span<const LossItem> batch,
                            const NoiseSchedule& sched, RngKey key, double p_uncond,
                            int n_classes, std::vector<int>* used_tokens = nullptr);

// Same objective on the real network, with gradients for every parameter
// accumulated into `grads` (flat, layout order; caller provides zeroed space).
// Items are processed in fixed-size chunks whose partial gradients are reduced
// in index order, so the bytes do not depend on the worker count.
double diffusion_loss_grad(const DenoiserWeights& w, std::span<const LossItem> batch,
                           const NoiseSchedule& sched, RngKey key, double p_uncond, float* grads,
                           std::vector<int>* used_tokens = nullptr);

// 64-bit mirror of the objective, for gradient verification only: identical
// draws (t, dropout coin, noise) to the 32-bit path, arithmetic in double
// throughout. params64 is the widened flat parameter vector; grads (optional)
// receives the full gradient in layout order. The training path never calls
// this — it exists so a finite-difference oracle can probe the exact compute
// graph at a precision where the comparison is meaningful.
double diffusion_loss_grad64(const DenoiserArch& arch, const nn::ParamLayout& layout,
                             std::span<const double> params64, std::span<const LossItem> batch,
                             const NoiseSchedule& sched, RngKey key, double p_uncond,
                             double* grads = nullptr);

struct TrainBaseConfig {
    long steps = 3000;
    int batch_size = 32;
    double lr = 1e-3;
    double warmup_frac = 0.1;  // fraction of steps spent on linear warmup
    double weight_decay = 0.0;
    double p_uncond = 0.1;
};

// Trains a fresh denoiser on the dataset; loss trace (one entry per step)
// lands in `trace` when given.
DenoiserWeights train_base(const data::Dataset& ds, const DenoiserArch& arch,
                           const TrainBaseConfig& cfg, RngKey key,
                           std::vector<double>* trace = nullptr);

// ---------------------------------------------------------------------------
// Ancestral sampler with classifier-free guidance
// ---------------------------------------------------------------------------

struct GuidanceConfig {
    double w = 2.0;         // guidance scale
    double p_uncond = 0.1;  // conditioning dropout used during base training
};

// Draw one image of the given class. At every step the noise estimate is
// eps_null + w * (eps_class - eps_null); w == 1 uses the conditional branch
// alone and w == 0 the unconditional branch alone, so those cases are exact.
// The overlay (when given) applies to both branches. Output is clamped to
// [0,1] at the end only.
Tensor sample(const DenoiserWeights& w, int cls, const GuidanceConfig& g,
              const NoiseSchedule& sched, RngKey key, const BranchOverlay* overlay = nullptr);

// Same sampler over an arbitrary evaluator (stub tests).
Tensor sample_with(const DenoiseFn& fn, int input_dim, int image_hw, int cls, int null_token,
                   double w, const NoiseSchedule& sched, RngKey key);

// ---------------------------------------------------------------------------
// Checkpoint container (also reused by the downstream classifiers)
// ---------------------------------------------------------------------------

void save_denoiser(const std::filesystem::path& path, const DenoiserWeights& w);
DenoiserWeights load_denoiser(const std::filesystem::path& path);

// Generic payload in the same container: arbitrary JSON descriptor + flat f32
// parameters.
void save_checkpoint(const std::filesystem::path& path, const std::string& desc_json,
                     std::span<const float> params);
std::pair<std::string, std::vector<float>> load_checkpoint(const std::filesystem::path& path);

}  // namespace loft::diff
