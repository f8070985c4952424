#pragma once

#include <cstdint>
#include <random>

namespace sigprop {

// Derives the seed of replica/stream `index` from a master seed via a
// splitmix64 step on (master + index * golden gamma). Streams for distinct
// indices are decorrelated, and the mapping is a fixed part of the output
// contract: estimator results must not depend on how replicas are scheduled.
inline std::uint64_t mix_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t z = master + (index + 1) * 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::mt19937_64 make_engine(std::uint64_t seed) { return std::mt19937_64(seed); }

}  // namespace sigprop
