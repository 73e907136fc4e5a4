#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace pyramidat {

// All randomness in the library is derived from explicit 64-bit seeds through
// the helpers below. Two kinds of generators are used:
//   * counter-based keys (key_*) for values that must be addressable out of
//     order, e.g. a dropout mask bit for (seed, site, batch element, unit);
//   * a sequential engine (Rng) for streams that are consumed in a fixed
//     order, e.g. parameter initialization.
// std::mt19937_64 output is pinned by the standard, and the distributions
// here are hand-rolled, so identical seeds give identical values on any
// platform.

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline constexpr std::uint64_t key_mix(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ splitmix64(b));
}

inline constexpr std::uint64_t key_mix(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return key_mix(key_mix(a, b), c);
}

inline constexpr std::uint64_t key_mix(std::uint64_t a, std::uint64_t b, std::uint64_t c,
                                       std::uint64_t d) {
    return key_mix(key_mix(a, b, c), d);
}

/// FNV-1a hash of a string tag, used to derive independent streams by name.
inline constexpr std::uint64_t tag_hash(std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline constexpr std::uint64_t key_stream(std::uint64_t seed, std::string_view tag) {
    return key_mix(seed, tag_hash(tag));
}

inline constexpr std::uint64_t key_stream(std::uint64_t seed, std::string_view tag,
                                          std::uint64_t index) {
    return key_mix(seed, tag_hash(tag), index);
}

/// Uniform double in [0, 1) from a counter key (53-bit mantissa fill).
inline constexpr double key_uniform(std::uint64_t key) {
    return static_cast<double>(splitmix64(key) >> 11) * 0x1.0p-53;
}

/// Uniform sign in {-1, +1} from a counter key.
inline constexpr int key_sign(std::uint64_t key) {
    return (splitmix64(key) >> 63) ? 1 : -1;
}

/// Sequential generator with portable distributions.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, bound), bound >= 1, by rejection.
    std::uint64_t bounded(std::uint64_t bound) {
        const std::uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            std::uint64_t r = engine_();
            if (r >= threshold) return r % bound;
        }
    }

    /// Standard normal via Box-Muller (no engine-dependent distribution state).
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    /// Normal truncated to [-2, 2] standard deviations, then scaled.
    double truncated_normal(double stddev) {
        for (;;) {
            double g = gaussian();
            if (g >= -2.0 && g <= 2.0) return g * stddev;
        }
    }

    /// In-place Fisher-Yates shuffle.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(bounded(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace pyramidat
