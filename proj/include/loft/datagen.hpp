#pragma once

#include <string>
#include <vector>

#include "loft/data.hpp"
#include "loft/rng.hpp"
#include "loft/tensor.hpp"

namespace loft::gen {

// Six renderer kinds; class id i always draws kind i.
inline constexpr int kShapeClassCount = 6;
const char* shape_name(int cls);

struct ShapeParams {
    double cx = 0.0;         // center offset from image center, pixels
    double cy = 0.0;
    double size = 3.0;       // radius-like extent, pixels
    double intensity = 1.0;  // foreground level
    double sigma = 0.0;      // background noise std
};

struct Range {
    double lo = 0.0, hi = 0.0;
    bool contains(double v) const { return v >= lo && v <= hi; }
    bool strictly_inside(const Range& outer) const { return outer.lo < lo && hi < outer.hi; }
};

struct ClassRanges {
    Range cx, cy, size, intensity, sigma;
};

// Parameter envelope per class. The broad regime plays the role of generic
// web-scale training data; the narrow regime is the downstream task, with
// every class confined to its own quadrant, bright and nearly noise-free.
struct RegimeConfig {
    std::string tag;  // "PRETRAIN" or "DOWNSTREAM"
    std::vector<ClassRanges> per_class;

    int n_classes() const { return static_cast<int>(per_class.size()); }
    void check(int cls, const ShapeParams& p) const;   // throws when out of range
    ShapeParams draw(int cls, RngStream& st) const;

    static RegimeConfig pretrain();
    static RegimeConfig downstream();
};

// True when every range of `inner` sits strictly inside the matching range
// of `outer`, for every class.
bool regime_strict_subset(const RegimeConfig& inner, const RegimeConfig& outer);

// Anti-aliased rendering (supersampled coverage) plus Gaussian background
// noise drawn from the key; clamped to [0,1].
Tensor render_shape(int cls, const ShapeParams& p, RngKey noise_key, int hw = 16);

// n_per_class images per class under the regime. The namespace string keeps
// separate draws (train pool vs held-out test) disjoint by construction.
data::Dataset make_dataset(const RegimeConfig& regime, int n_per_class, uint64_t seed,
                           const std::string& ns = "train", int hw = 16);

// k images per class sampled without replacement from the pool.
data::Dataset make_fewshot(const data::Dataset& pool, int k, uint64_t seed);

}  // namespace loft::gen
