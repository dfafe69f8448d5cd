#pragma once

#include <algorithm>
#include <cstdint>
#include <random>

namespace pnca {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace detail

/// Seeded random stream. Per-sample streams are derived from
/// (run_seed, epoch, index) so an epoch replays identically regardless of
/// which worker processes which sample.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(detail::splitmix64(seed)) {}

    static Rng for_stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0) {
        std::uint64_t s = detail::splitmix64(seed);
        s = detail::splitmix64(s ^ a);
        s = detail::splitmix64(s ^ b);
        s = detail::splitmix64(s ^ c);
        return Rng(s);
    }

    /// Uniform in [0, 1).
    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }

    /// Uniform integer in [0, n); n must be > 0.
    std::uint64_t uniform_int(std::uint64_t n) {
        return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename It>
    void shuffle(It first, It last) {
        std::shuffle(first, last, engine_);
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace pnca
