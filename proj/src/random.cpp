// SPDX-License-Identifier: Apache-2.0
#include "lalora/random.hpp"

#include <cmath>
#include <numbers>

namespace lalora {

std::uint64_t CounterRng::below(std::uint64_t n) noexcept {
    if (n <= 1) {
        return 0;
    }
    // Rejection keeps the draw unbiased.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) {
        x = next_u64();
    }
    return x % n;
}

double CounterRng::normal() noexcept {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace lalora
