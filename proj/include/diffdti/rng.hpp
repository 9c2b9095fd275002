#pragma once

#include <cmath>
#include <cstdint>

namespace diffdti {

// Counter-based generator: every stream is a pure function of (seed, stream
// key), so checkpoint/resume and parallel substreams reproduce exactly without
// carrying generator state around. Core mixer is splitmix64; the sequence is
// xoshiro256++ seeded from it.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed + 0x9e3779b97f4a7c15ULL;
        for (auto& s : s_) {
            x = mix64(x);
            s = x;
        }
        has_cached_gauss_ = false;
    }

    // Derive an independent substream, e.g. Rng(seed).fork(step).fork(kNoise).
    Rng fork(uint64_t key) const {
        Rng r(0);
        uint64_t x = mix64(s_[0] ^ mix64(key + 0x632be59bd9b4e019ULL));
        for (int i = 0; i < 4; ++i) {
            x = mix64(x ^ s_[i]);
            r.s_[i] = x;
        }
        r.has_cached_gauss_ = false;
        return r;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform on [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; std::normal_distribution is implementation-defined and would
    // break cross-platform reproducibility of sampled datasets.
    double gauss() {
        if (has_cached_gauss_) {
            has_cached_gauss_ = false;
            return cached_gauss_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_gauss_ = r * std::sin(a);
        has_cached_gauss_ = true;
        return r * std::cos(a);
    }

    uint64_t uniform_index(uint64_t n) { return next_u64() % n; }

private:
    static uint64_t mix64(uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4];
    bool has_cached_gauss_;
    double cached_gauss_ = 0.0;
};

} // namespace diffdti
