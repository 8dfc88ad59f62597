#pragma once

// Stateless seed derivation. Every random draw in training is keyed by
// (seed, stream, iteration, ...) so a resumed run sees the same numbers as an
// uninterrupted one without persisting generator state.

#include <cstdint>
#include <initializer_list>
#include <random>

namespace gsgn {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = splitmix64(seed);
  for (auto k : keys) h = splitmix64(h ^ splitmix64(k + 0x632BE59BD9B4E019ull));
  return h;
}

inline std::mt19937_64 derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  return std::mt19937_64(derive_seed(seed, keys));
}

// Stream tags keep independent consumers from sharing draws.
namespace stream {
inline constexpr std::uint64_t paired = 1;
inline constexpr std::uint64_t unpaired_source = 2;
inline constexpr std::uint64_t unpaired_target = 3;
inline constexpr std::uint64_t crop = 4;
inline constexpr std::uint64_t penalty = 5;
inline constexpr std::uint64_t task = 6;
inline constexpr std::uint64_t init = 7;
inline constexpr std::uint64_t synthetic = 8;
}  // namespace stream

}  // namespace gsgn
