// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace icl {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Stable 64-bit mix of two words; order matters.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept {
  return splitmix64(splitmix64(a) ^ (b + 0x632BE59BD9B4E019ULL + (a << 6) + (a >> 2)));
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) noexcept {
  return mix_seed(mix_seed(a, b), c);
}

/// Identifies one episode's random stream.
struct EpisodeSeed {
  std::uint64_t base_seed = 0;
  std::uint64_t episode_index = 0;

  std::uint64_t stream_seed() const noexcept { return mix_seed(base_seed, episode_index); }
  Rng rng() const { return Rng(stream_seed()); }
};

inline double sample_normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

inline double sample_uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline std::vector<double> sample_normal_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = sample_normal(rng);
  return v;
}

inline std::vector<double> sample_uniform_vec(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = sample_uniform(rng, lo, hi);
  return v;
}

}  // namespace icl
