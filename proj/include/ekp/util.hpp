#pragma once
#include <cstdint>
#include <functional>
#include <random>
#include <string>

namespace ekp {

using Rng = std::mt19937_64;

// splitmix64 finalizer; derives independent stream seeds from a base seed.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double normal(Rng& rng, double mean, double stddev) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}

// Runs fn(i) for i in [0, n). Honors EKP_THREADS; falls back to serial for
// small n. Each index must write only to its own slot.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

int worker_count();

std::string format_double(double v, int precision = 6);

}  // namespace ekp
