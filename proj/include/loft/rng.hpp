#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace loft {

// Counter-based keyed RNG. A key is derived from a 64-bit seed plus a
// hierarchical path of labels; the stream for a key is a pure function of
// (key, counter), so parallel execution order never affects sampled values.
struct RngKey {
    uint64_t state = 0;

    static RngKey root(uint64_t seed);
    RngKey child(uint64_t label) const;
    RngKey child(std::string_view label) const;
};

// Sample stream for one key. Gaussian draws use Box-Muller with a cached
// spare, so the stream is stateful but fully determined by the key.
class RngStream {
public:
    explicit RngStream(RngKey key) : key_(key.state) {}

    uint64_t next_u64();

    // Uniform on [0, 1).
    double uniform();
    // Standard normal.
    double normal();
    // Uniform integer on [0, n), n >= 1.
    uint64_t uniform_below(uint64_t n);

    void fill_normal(std::span<float> out);
    void fill_uniform(std::span<float> out);

private:
    uint64_t key_;
    uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace loft
