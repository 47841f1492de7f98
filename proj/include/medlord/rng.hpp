#ifndef MEDLORD_RNG_HPP
#define MEDLORD_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "medlord/common.hpp"

namespace medlord {

// Deterministic RNG. mt19937_64 is fully specified by the standard, and all
// value transforms below are hand-written so streams are reproducible across
// standard-library implementations (std::*_distribution is not portable).
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    float uniform(float lo, float hi) {
        return lo + static_cast<float>(uniform()) * (hi - lo);
    }

    // uniform integer in [lo, hi] inclusive, rejection sampled (no modulo bias)
    int64_t uniform_int(int64_t lo, int64_t hi) {
        require(lo <= hi, ErrorKind::config, "uniform_int: empty range");
        uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
        if (range == 0) return static_cast<int64_t>(eng_()); // full 64-bit range
        uint64_t limit = UINT64_MAX - UINT64_MAX % range;
        uint64_t v;
        do {
            v = eng_();
        } while (v >= limit);
        return lo + static_cast<int64_t>(v % range);
    }

    // standard normal via Box-Muller; two uniforms per draw, spare discarded
    // so the stream position is draw-count invariant
    float normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        return static_cast<float>(r * std::cos(2.0 * 3.14159265358979323846 * u2));
    }

    float normal(float mean, float sd) { return mean + sd * normal(); }

    // derived child stream; tag keeps sibling streams decorrelated
    Rng fork(std::string_view tag) {
        uint64_t s = fnv1a64(tag, eng_());
        return Rng(s);
    }

private:
    std::mt19937_64 eng_;
};

inline uint64_t derive_seed(uint64_t base, std::string_view tag) {
    uint64_t h = fnv1a64(tag);
    h ^= base + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h;
}

} // namespace medlord

#endif
