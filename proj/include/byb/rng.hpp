#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace byb {

// Deterministic random helpers. std::mt19937_64 is fully specified by the
// standard; the distributions below are implemented here because the standard
// library's distribution classes are implementation-defined and would break
// the byte-identical-per-seed contract across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform double in [0, 1) with 53 random bits.
    double u01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

    // Uniform integer in [lo, hi], inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
        if (range == 0) return lo + static_cast<std::int64_t>(engine_());  // full 64-bit span
        auto v = static_cast<std::uint64_t>(u01() * static_cast<double>(range));
        if (v >= range) v = range - 1;
        return lo + static_cast<std::int64_t>(v);
    }

    double gauss() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * u01() - 1.0;
            v = 2.0 * u01() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        has_spare_ = true;
        return u * f;
    }

    // Knuth's product method for small lambda, normal approximation above.
    std::int64_t poisson(double lambda) {
        if (lambda <= 0.0) return 0;
        if (lambda < 60.0) {
            const double limit = std::exp(-lambda);
            std::int64_t k = 0;
            double p = 1.0;
            do {
                ++k;
                p *= u01();
            } while (p > limit);
            return k - 1;
        }
        const double n = lambda + std::sqrt(lambda) * gauss();
        return n < 0.0 ? 0 : static_cast<std::int64_t>(std::llround(n));
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Stable per-stream seed derivation (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace byb
