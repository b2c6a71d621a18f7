#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace adafuse {

// Deterministic, self-contained RNG. std:: distributions are
// implementation-defined, so uniforms/normals are generated here to keep
// seeded outputs stable across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) { reseed(seed); }

    void reseed(uint64_t seed) {
        // SplitMix64 expansion of the seed into xoshiro256** state.
        uint64_t x = seed;
        for (auto& s : state_) s = splitmix64(x);
        has_spare_ = false;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    uint64_t uniform_int(uint64_t n) {
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            const uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        constexpr double two_pi = 6.283185307179586476925286766559;
        spare_ = r * std::sin(two_pi * u2);
        has_spare_ = true;
        return r * std::cos(two_pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent substream keyed by a tag and indices; used so that results
    // do not depend on the order in which components draw randomness.
    Rng derive(std::string_view tag, uint64_t a = 0, uint64_t b = 0) const {
        uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
        for (const char c : tag) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        uint64_t x = state_[0] ^ h;
        x = splitmix64(x) ^ (a + 0x9e3779b97f4a7c15ull);
        x = splitmix64(x) ^ (b + 0xbf58476d1ce4e5b9ull);
        return Rng(splitmix64(x));
    }

private:
    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9e3779b97f4a7c15ull;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }
    static uint64_t splitmix64(uint64_t&& x) {
        uint64_t y = x;
        return splitmix64(y);
    }
    static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    uint64_t state_[4] = {};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace adafuse
