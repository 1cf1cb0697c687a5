#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "loft/data.hpp"
#include "loft/diffusion.hpp"
#include "loft/lora.hpp"
#include "loft/rng.hpp"

namespace loft::pipe {

// ---------------------------------------------------------------------------
// Generation methods
// ---------------------------------------------------------------------------

// How synthetic images are produced:
//   ClassCond    — base model conditioned on the class token, no adapters.
//   PerClassLoRA — one adapter per class, always applied as a singleton.
//   Loft         — one adapter per few-shot image; each generated image fuses
//                  a freshly sampled weighted set of same-class adapters.
struct GenMethod {
    enum class Kind { ClassCond, PerClassLoRA, Loft };
    Kind kind = Kind::ClassCond;
    lora::LambdaSampler sampler;  // Loft only
    diff::GuidanceConfig guidance;

    // Stable identifier used in file names and result tables, e.g.
    // "classcond", "perclass", "loft-fixed0.5".
    std::string tag() const;
};

// Which adapters were fused into one generated image, by source image id.
struct FusionRecord {
    std::vector<uint64_t> adapter_ids;
    std::vector<double> weights;
};

struct SyntheticDataset {
    data::Dataset ds;
    std::string method_tag;
    uint64_t base_hash = 0;
    uint64_t seed = 0;
    // One record per image, aligned with ds.items; empty for methods that do
    // not fuse (ClassCond) — PerClassLoRA records its singleton.
    std::vector<FusionRecord> fusion;

    std::string manifest_json() const;  // deterministic provenance document
};

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

// s_per_class images for every class. Adapters are grouped by their class
// label internally; PerClassLoRA needs exactly one per class, Loft at least
// one. Image order is class-major, and bytes depend only on (inputs, seed),
// not on the worker count.
SyntheticDataset generate_dataset(const GenMethod& method, int s_per_class,
                                  const diff::DenoiserWeights& base,
                                  std::span<const lora::LoraAdapter* const> adapters,
                                  uint64_t seed);

// ---------------------------------------------------------------------------
// Few-shot adaptation + generation in one pass
// ---------------------------------------------------------------------------

struct LoftRunConfig {
    lora::FinetuneConfig finetune;
    lora::LambdaSampler sampler;
    diff::GuidanceConfig guidance;
};

struct LoftRunResult {
    data::Dataset fewshot;               // the k·C source images
    std::vector<lora::LoraAdapter> adapters;  // one per source image, same order
    SyntheticDataset synth;
};

// Phase 1: fit one adapter per few-shot image (keyed per (class, slot), so
// the set is independent of the generation phase). Phase 2: generate s·C
// images with per-image fusion sampling. When out_dir is non-empty, every
// adapter, the dataset, and a manifest are persisted there.
LoftRunResult run_loft_end_to_end(const data::Dataset& pool, int k, int s_per_class,
                                  const diff::DenoiserWeights& base, const LoftRunConfig& cfg,
                                  uint64_t seed,
                                  const std::filesystem::path& out_dir = {});

}  // namespace loft::pipe
