#pragma once

#include <cstdint>
#include <random>

namespace proxyplan {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives an independent stream seed from a master seed and a stream tag.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  std::uint64_t s = master ^ (stream * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL);
  std::uint64_t a = splitmix64(s);
  std::uint64_t b = splitmix64(s);
  return a ^ (b >> 1);
}

/// Uniform integer in [lo, hi], inclusive.
inline int uniform_int(Rng& rng, int lo, int hi) {
  std::uniform_int_distribution<int> dist(lo, hi);
  return dist(rng);
}

inline double uniform_real(Rng& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

/// True with probability p. Consumes no randomness when p <= 0.
inline bool chance(Rng& rng, double p) {
  if (p <= 0.0) return false;
  return uniform_real(rng) < p;
}

}  // namespace proxyplan
