#pragma once

#include <cmath>
#include <cstdint>

namespace ttmg {

// Deterministic RNG with explicitly defined output distributions.
// std::mt19937_64 is fully specified by the standard, but the standard
// distributions are not; both conversions below are pinned here so that
// identical seeds give identical streams on every build.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // splitmix64 warm-up decorrelates small consecutive seeds
        next_u64();
        next_u64();
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    // standard normal via Box-Muller (no cached second value, keeps the
    // stream position a pure function of call count)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool coin() { return (next_u64() & 1ULL) != 0; }

private:
    uint64_t state_;
};

// Stream derivation: hash a seed with stream tags so independent parts of
// the pipeline (per-sample, per-epoch, per-split) never share a stream.
inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t z = seed;
    auto mix = [&z](uint64_t v) {
        z ^= v + 0x9e3779b97f4a7c15ULL + (z << 6) + (z >> 2);
        z *= 0xff51afd7ed558ccdULL;
        z ^= z >> 33;
    };
    mix(a);
    mix(b);
    mix(c);
    return z;
}

} // namespace ttmg
