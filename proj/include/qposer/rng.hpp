// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string_view>

namespace qposer {

/// SplitMix64 finalizer; also used to derive sub-stream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// 64-bit FNV-1a over raw bytes.
constexpr std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xCBF29CE484222325ULL) noexcept {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// SplitMix64 generator. All randomness in the project flows through this
/// type so that sequences are identical on every platform (the standard
/// library distributions are implementation-defined).
///
///   state += 0x9E3779B97F4A7C15; return mix64(state)
///   uniform01   = (next() >> 11) * 2^-53
///   uniform_index(n): rejection below (2^64 mod n), then r mod n
///   derive(seed, name) = Rng(mix64(seed ^ fnv1a(name)))
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) noexcept : state_(seed) {}

    static Rng derive(std::uint64_t seed, std::string_view stream) noexcept {
        return Rng(mix64(seed ^ fnv1a(stream)));
    }

    std::uint64_t next() noexcept {
        state_ += 0x9E3779B97F4A7C15ULL;
        return mix64(state_);
    }

    double uniform01() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform01(); }

    /// Uniform over [0, n). n must be positive.
    std::uint64_t uniform_index(std::uint64_t n) noexcept {
        const std::uint64_t threshold = (0 - n) % n;
        for (;;) {
            const std::uint64_t r = next();
            if (r >= threshold) return r % n;
        }
    }

    std::uint64_t state() const noexcept { return state_; }
    void set_state(std::uint64_t s) noexcept { state_ = s; }

private:
    std::uint64_t state_;
};

}  // namespace qposer
