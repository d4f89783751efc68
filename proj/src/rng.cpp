#include "musteer/rng.hpp"

#include "musteer/common.hpp"

#include <cmath>
#include <numbers>

namespace musteer {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::uint64_t fnv1a64_str(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
}

Rng Rng::stream(std::uint64_t seed, std::string_view name, std::uint64_t index) {
    std::uint64_t mix = seed;
    mix = splitmix64(mix) ^ fnv1a64_str(name);
    mix = splitmix64(mix) ^ index;
    return Rng(splitmix64(mix));
}

std::uint64_t Rng::next_u64() {
    std::uint64_t* s = state_;
    const std::uint64_t result = rotl(s[1] * 5, 7) * 9;
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
    if (has_cached_normal_) {
        has_cached_normal_ = false;
        return cached_normal_;
    }
    // Box-Muller; u1 shifted away from zero so log stays finite.
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * std::numbers::pi * u2;
    cached_normal_ = r * std::sin(theta);
    has_cached_normal_ = true;
    return r * std::cos(theta);
}

std::uint32_t Rng::randint(std::uint32_t n) {
    if (n == 0) throw UsageError("Rng::randint: n must be positive");
    // Rejection sampling over the top 32 bits keeps the draw unbiased.
    const std::uint64_t limit = (0x100000000ULL / n) * n;
    for (;;) {
        std::uint64_t draw = next_u64() >> 32;
        if (draw < limit) return static_cast<std::uint32_t>(draw % n);
    }
}

std::vector<int> Rng::sample_without_replacement(int n, int k) {
    if (k > n || k < 0) {
        throw UsageError(concat("sample_without_replacement: k=", k, " out of range for n=", n));
    }
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    std::vector<int> out;
    out.reserve(k);
    for (int i = 0; i < k; ++i) {
        std::uint32_t j = randint(static_cast<std::uint32_t>(n - i));
        out.push_back(pool[j]);
        std::swap(pool[j], pool[n - i - 1]);
    }
    return out;
}

}  // namespace musteer
