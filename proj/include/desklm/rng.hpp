#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <vector>

namespace desklm {

// splitmix64 step; also used as the seed/stream mixer.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Deterministic PRNG with identical output on every platform. Every stochastic
// choice in the pipeline draws from one of these, seeded through mix_seed so
// that independent stages never share a stream.
class Rng {
   public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // decorrelate trivially close seeds
        (void)splitmix64(state_);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // [0, 1) with 53-bit resolution
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // unbiased integer in [0, n)
    uint64_t bounded(uint64_t n) {
        uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) {
                return r % n;
            }
        }
    }

    // standard normal via Box-Muller; consumes exactly two uniforms
    double gaussian() {
        double u1 = next_double();
        double u2 = next_double();
        // avoid log(0)
        if (u1 <= 0.0) {
            u1 = 0x1.0p-53;
        }
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Fisher-Yates
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(bounded(i));
            std::swap(v[i - 1], v[j]);
        }
    }

   private:
    uint64_t state_;
};

// Combines a base seed with stream identifiers (step, layer, purpose tag, ...)
// into a fresh stream seed.
inline uint64_t mix_seed(std::initializer_list<uint64_t> parts) {
    uint64_t h = 0x6A09E667F3BCC908ULL;
    for (uint64_t p : parts) {
        uint64_t s = h ^ (p + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2));
        h = splitmix64(s);
    }
    return h;
}

}  // namespace desklm
