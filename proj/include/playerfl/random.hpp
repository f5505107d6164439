#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>

namespace playerfl {

/// Mixes a seed with a stream index into an independent 64-bit seed
/// (splitmix64 finalizer). Used to give every client, epoch and probe its own
/// substream so results never depend on call order.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

template <typename... Streams>
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, Streams... rest) {
    return derive_seed(derive_seed(seed, stream), static_cast<std::uint64_t>(rest)...);
}

/// Seeded generator whose variates are bit-identical across platforms.
///
/// std::mt19937_64 output is fixed by the standard, but the std::*_distribution
/// adaptors and std::shuffle are not, so every transform lives here.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(derive_seed(seed, 0x9e3779b97f4a7c15ULL)) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform();
    /// Uniform on (0, 1).
    double uniform_open();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer on [0, n); n must be positive.
    std::uint64_t below(std::uint64_t n);
    double normal();
    /// Gamma(shape, 1) via Marsaglia-Tsang, boosted for shape < 1.
    double gamma(double shape);
    /// +1 or -1 with equal probability.
    double rademacher() { return (next_u64() >> 63) != 0 ? 1.0 : -1.0; }

    template <typename T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace playerfl
