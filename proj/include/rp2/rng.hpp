#pragma once

#include <cstdint>
#include <random>

namespace rp2 {

using Rng = std::mt19937_64;

// SplitMix64 finalizer. Used to derive independent stream seeds from a run
// seed so that e.g. evaluation transforms never share a stream with the
// attack that produced the perturbation.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return Rng(mix_seed(seed, stream));
}

// Uniform draw in [lo, hi]. Returns lo exactly when lo == hi.
inline double uniform(Rng& rng, double lo, double hi) {
  if (lo == hi) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Named stream ids so call sites do not collide by accident.
namespace streams {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kShuffle = 2;
inline constexpr std::uint64_t kTransforms = 3;
inline constexpr std::uint64_t kSpsa = 4;
inline constexpr std::uint64_t kSubstitute = 5;
inline constexpr std::uint64_t kEvaluation = 6;
inline constexpr std::uint64_t kDataset = 7;
inline constexpr std::uint64_t kStealTargets = 8;
inline constexpr std::uint64_t kProbe = 9;
inline constexpr std::uint64_t kBackground = 10;
}  // namespace streams

}  // namespace rp2
