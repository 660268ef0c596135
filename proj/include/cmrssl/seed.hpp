#pragma once

#include <array>
#include <cstdint>
#include <random>

namespace cmrssl {

/// Derives an independent 64-bit seed from a base seed and a stream index.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::seed_seq seq{std::uint32_t(a), std::uint32_t(a >> 32), std::uint32_t(b),
                      std::uint32_t(b >> 32)};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (std::uint64_t(out[0]) << 32) | out[1];
}

} // namespace cmrssl
