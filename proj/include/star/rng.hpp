#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace star {

// Seeded RNG with explicitly constructed distributions. mt19937_64 output is
// pinned by the standard, but uniform_real_distribution is not, so draws are
// built from raw bits to keep streams identical across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n), rejection sampled
    std::uint64_t next_below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = eng_();
        } while (x >= limit);
        return x % n;
    }

    // derive an independent stream (e.g. one per dataset split)
    Rng fork() { return Rng(eng_() ^ 0x9e3779b97f4a7c15ULL); }

private:
    std::mt19937_64 eng_;
};

inline double glorot_limit(int fan_in, int fan_out) {
    return std::sqrt(6.0 / (fan_in + fan_out));
}

}  // namespace star
