#pragma once

#include <cstdint>
#include <random>

namespace cddod {

/// splitmix64 mixer; used to derive independent seeds from (base, salt) pairs
/// so that separate random consumers (data order, anchor sampling, dropout,
/// page generation) never share a stream.
inline uint64_t mix_seed(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t salt) { return mix_seed(base ^ mix_seed(salt)); }

inline std::mt19937_64 make_rng(uint64_t base, uint64_t salt = 0) { return std::mt19937_64(derive_seed(base, salt)); }

inline double uniform(std::mt19937_64& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {  // inclusive bounds
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

}  // namespace cddod
