#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "hma/tensor.hpp"

namespace hma {

/// Seeded generator whose derived streams are identical on every host.
/// The std distributions are implementation-defined, so the conversions
/// from raw 64-bit draws are done here.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : engine_() % n; }

    std::int64_t range(std::int64_t lo, std::int64_t hi_inclusive) {
        return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        // Box-Muller, the second variate is discarded to keep the stream simple.
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Derive an independent stream, e.g. one per scene or per epoch.
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 engine_;
};

template <class T>
Tensor<T> random_normal(Shape dims, Rng& rng, double stddev = 1.0, double mean = 0.0) {
    Tensor<T> t(std::move(dims));
    for (auto& v : t.data()) v = static_cast<T>(rng.normal(mean, stddev));
    return t;
}

template <class T>
Tensor<T> random_uniform(Shape dims, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(std::move(dims));
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

}  // namespace hma
