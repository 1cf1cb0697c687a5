#include "loft/rng.hpp"

#include <cmath>

namespace loft {
namespace {

constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ull;

// SplitMix64 finalizer; full avalanche on 64 bits.
uint64_t mix64(uint64_t x) {
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ull;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBull;
    x ^= x >> 31;
    return x;
}

uint64_t combine(uint64_t state, uint64_t label) {
    return mix64(state + kGolden * (label + 0x632BE59BD9B4E019ull));
}

uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

}  // namespace

RngKey RngKey::root(uint64_t seed) { return RngKey{mix64(seed + kGolden)}; }

RngKey RngKey::child(uint64_t label) const { return RngKey{combine(state, label)}; }

RngKey RngKey::child(std::string_view label) const {
    return RngKey{combine(state, fnv1a64(label))};
}

uint64_t RngStream::next_u64() { return mix64(key_ + kGolden * ++counter_); }

double RngStream::uniform() {
    // 53-bit mantissa construction, uniform on [0, 1).
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // Box-Muller; u1 shifted away from 0 so log() stays finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

uint64_t RngStream::uniform_below(uint64_t n) {
    // Rejection sampling to avoid modulo bias.
    const uint64_t limit = n * (UINT64_MAX / n);
    uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
}

void RngStream::fill_normal(std::span<float> out) {
    for (float& v : out) v = static_cast<float>(normal());
}

void RngStream::fill_uniform(std::span<float> out) {
    for (float& v : out) v = static_cast<float>(uniform());
}

}  // namespace loft
