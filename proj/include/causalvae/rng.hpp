#pragma once

#include <cstdint>
#include <random>

namespace causalvae {

// Independent generator for (seed, stream); used so per-sample and per-epoch
// draws do not depend on the order in which they are requested.
inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace causalvae
