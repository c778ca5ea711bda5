#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace rhoflow {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}
}  // namespace detail

/// Deterministic random stream. All variates are derived from raw mt19937_64
/// words through fully specified arithmetic, so identical seeds reproduce
/// identical doubles regardless of standard-library distribution internals.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), gen_(detail::splitmix64(seed)) {}

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Standard normal via Box-Muller. Consumes two words per call.
    double gaussian() {
        const double u1 = 1.0 - uniform01();  // (0, 1], keeps log finite
        const double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Multiply-shift rejection-free map; bias is < 2^-53 for the n used here.
        return static_cast<std::uint64_t>(uniform01() * static_cast<double>(n));
    }

    /// Independent child stream; deterministic in (seed, stream).
    Rng fork(std::uint64_t stream) const {
        return Rng(detail::splitmix64(seed_ ^ (0xd1342543de82ef95ULL * (stream + 1))));
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::mt19937_64 gen_;
};

}  // namespace rhoflow
