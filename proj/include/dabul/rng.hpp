#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace dabul {

using Rng = std::mt19937_64;

// Hash a master seed and a path of stream labels into an independent seed.
// Every random stream in the project (replicate, chain, stage) is derived this
// way so that results depend only on (master seed, labels).
std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path);

inline Rng make_rng(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
  return Rng(derive_seed(master, path));
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

// Stream tags.
namespace stream {
inline constexpr std::uint64_t population = 0x706f70;
inline constexpr std::uint64_t risk = 0x7269736b;
inline constexpr std::uint64_t outcomes = 0x6f7574;
inline constexpr std::uint64_t survey = 0x737276;
inline constexpr std::uint64_t chain = 0x636861;
inline constexpr std::uint64_t geography = 0x67656f;
}  // namespace stream

}  // namespace dabul
