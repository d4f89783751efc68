#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace musteer {

/// Deterministic xoshiro256** generator with explicit, fully specified
/// sampling routines. Results are bit-identical across platforms and builds,
/// which the checkpoint/dataset reproducibility contracts rely on.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    /// Derives an independent stream from (seed, name, index). Streams with
    /// different names or indices are decorrelated, so per-sample work can be
    /// parallelized or reordered without changing results.
    static Rng stream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0);

    std::uint64_t next_u64();

    /// Uniform in [0, 1) with 53 random mantissa bits.
    double uniform();

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi);

    /// Standard normal via Box-Muller (both values consumed in order).
    double normal();

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Unbiased integer in [0, n). n must be > 0.
    std::uint32_t randint(std::uint32_t n);

    /// Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = randint(static_cast<std::uint32_t>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// k distinct indices drawn from [0, n), in selection order.
    std::vector<int> sample_without_replacement(int n, int k);

private:
    std::uint64_t state_[4];
    bool has_cached_normal_ = false;
    double cached_normal_ = 0.0;
};

}  // namespace musteer
