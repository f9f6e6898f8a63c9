#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_01.hpp>
#include <boost/random/uniform_int_distribution.hpp>

namespace gauntlet {

// std::mt19937_64 is fully specified by the standard; the boost distributions
// are used instead of <random>'s because their algorithms are fixed, which keeps
// every experiment byte-reproducible across standard libraries.
using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed of an independent sub-stream identified by (seed, tag, index).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0) {
  return splitmix64(splitmix64(splitmix64(seed) ^ tag) ^ index);
}

inline Rng make_stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0) {
  return Rng(derive_seed(seed, tag, index));
}

/// Uniform integer in [0, n). n must be positive.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return boost::random::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

inline double uniform_real(Rng& rng) { return boost::random::uniform_01<double>()(rng); }

inline double gaussian(Rng& rng, double mean, double stddev) {
  return boost::random::normal_distribution<double>(mean, stddev)(rng);
}

inline bool coin_flip(Rng& rng) { return uniform_index(rng, 2) == 1; }

/// k distinct values from [0, n), uniform without replacement (Floyd's algorithm),
/// returned sorted.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  k = std::min(k, n);
  std::vector<std::size_t> picked;
  picked.reserve(k);
  if (k == n) {
    for (std::size_t i = 0; i < n; ++i) picked.push_back(i);
    return picked;
  }
  std::vector<bool> taken;
  const bool dense = k > 32;
  if (dense) taken.assign(n, false);
  auto contains = [&](std::size_t v) {
    return dense ? static_cast<bool>(taken[v]) : std::find(picked.begin(), picked.end(), v) != picked.end();
  };
  for (std::size_t j = n - k; j < n; ++j) {
    std::size_t t = boost::random::uniform_int_distribution<std::size_t>(0, j)(rng);
    std::size_t chosen = contains(t) ? j : t;
    picked.push_back(chosen);
    if (dense) taken[chosen] = true;
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

/// ceil(ratio * n), robust to representation error in ratio * n.
inline std::size_t ceil_fraction(double ratio, std::size_t n) {
  const double raw = ratio * static_cast<double>(n);
  const double rounded = std::round(raw);
  if (std::abs(raw - rounded) < 1e-9) return static_cast<std::size_t>(rounded);
  return static_cast<std::size_t>(std::ceil(raw));
}

}  // namespace gauntlet
