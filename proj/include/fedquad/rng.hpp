#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>

namespace fedquad {

/// Counter-based SplitMix64 stream.
///
/// The n-th draw (n = 1, 2, ...) is `mix64(seed + n * 0x9E3779B97F4A7C15)`,
/// where `mix64` is the SplitMix64 finalizer. Output depends only on
/// (seed, counter), so streams are reproducible across platforms and can be
/// repositioned by restoring the counter.
///
/// Derived distributions:
///  - uniform():   top 53 bits of a draw scaled by 2^-53, in [0, 1)
///  - normal():    Box-Muller cosine branch, two draws per sample
///  - gamma(k):    Marsaglia-Tsang squeeze; k < 1 boosted via U^(1/k)
///  - below(n):    draw mod n
class RngStream {
public:
    static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

    RngStream() = default;
    explicit RngStream(std::uint64_t seed, std::uint64_t counter = 0) : seed_(seed), counter_(counter) {}

    static constexpr std::uint64_t mix64(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64() {
        ++counter_;
        return mix64(seed_ + counter_ * kGamma);
    }

    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("RngStream::below: n must be positive");
        return next_u64() % n;
    }

    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    double gamma(double shape) {
        if (!(shape > 0.0)) throw std::invalid_argument("RngStream::gamma: shape must be positive");
        if (shape < 1.0) {
            const double boost = std::pow(1.0 - uniform(), 1.0 / shape);
            return gamma(shape + 1.0) * boost;
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = 0.0;
            double v = 0.0;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = 1.0 - uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    /// Child stream for an independent consumer; does not advance this stream.
    RngStream fork(std::uint64_t tag) const { return RngStream(mix64(seed_ ^ mix64(tag + kGamma)), 0); }

private:
    std::uint64_t seed_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace fedquad
