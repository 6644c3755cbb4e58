#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace far {

// Deterministic RNG with self-contained distributions. std::mt19937 output
// is pinned by the standard but the std distributions are not, so uniform
// and normal draws are derived here directly from the raw 32-bit stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(static_cast<std::uint32_t>(seed ^ (seed >> 32))) {}

    std::uint32_t next_u32() { return gen_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(gen_()) * (1.0 / 4294967296.0); }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    int uniform_int(int n) {
        // rejection sampling to avoid modulo bias
        std::uint32_t limit = 4294967295u - 4294967295u % static_cast<std::uint32_t>(n);
        std::uint32_t v;
        do {
            v = gen_();
        } while (v >= limit);
        return static_cast<int>(v % static_cast<std::uint32_t>(n));
    }

    // standard normal via Box-Muller
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925287 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = static_cast<int>(last - first);
        for (int i = n - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(first[i], first[j]);
        }
    }

private:
    std::mt19937 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// splitmix64, used to derive independent stream seeds from a master seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace far
