// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace lalora {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Stateless counter-based generator: every draw is a pure function of
/// (seed, stream, counter), so splitting work across threads never changes
/// which value a given draw produces.
class CounterRng {
public:
    constexpr CounterRng(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter = 0) noexcept
        : key_(mix64(mix64(seed) ^ (stream * 0xD1B54A32D192ED03ULL))), counter_(counter) {}

    /// Raw 64 bits at an absolute counter position.
    [[nodiscard]] constexpr std::uint64_t at(std::uint64_t counter) const noexcept {
        return mix64(key_ ^ mix64(counter));
    }

    constexpr std::uint64_t next_u64() noexcept { return at(counter_++); }

    /// Uniform in the open interval (0, 1).
    double uniform() noexcept {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) noexcept;

    /// Standard normal via Box–Muller, consuming two counters per draw.
    double normal() noexcept;

    [[nodiscard]] constexpr std::uint64_t counter() const noexcept { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_;
};

/// Named streams so independent uses of one seed never share draws.
namespace streams {
inline constexpr std::uint64_t kClassMeans = 1;
inline constexpr std::uint64_t kTrainNoise = 2;
inline constexpr std::uint64_t kEvalNoise = 3;
inline constexpr std::uint64_t kRotation = 4;
inline constexpr std::uint64_t kShuffle = 5;
inline constexpr std::uint64_t kBaseInit = 6;
inline constexpr std::uint64_t kLoraInit = 7;
inline constexpr std::uint64_t kDropout = 8;
inline constexpr std::uint64_t kLaplaceBatches = 9;
inline constexpr std::uint64_t kMonteCarlo = 10;
inline constexpr std::uint64_t kLabelOrder = 11;
}  // namespace streams

}  // namespace lalora
