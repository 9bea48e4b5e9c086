#pragma once

// Reproducible random streams.  Every sampling unit (a shot, a trial, an
// assembly cycle) owns its own engine seeded from (master seed, index), so
// results do not depend on evaluation order or on how work is divided
// between threads.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

namespace tweezersim {
namespace rng {

// Mixing finalizer from the splitmix64 generator; good avalanche behaviour,
// used here purely to spread structured (seed, index) pairs over 64 bits.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(splitmix64(seed) ^ splitmix64(index * 0x9e3779b97f4a7c15ULL + 1));
}

inline std::uint64_t derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return derive(derive(seed, a), b);
}

// Thin wrapper bundling an engine with the distributions used throughout.
// A Stream is always constructed fresh for its unit of work.
class Stream {
 public:
  explicit Stream(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return uniform_(engine_); }

  double gaussian(double mean, double sigma) {
    return mean + sigma * normal_(engine_);
  }

  // Inverse-CDF exponential sampling; rate 0 yields +inf (no event).
  double exponential(double rate) {
    if (rate <= 0.0) return std::numeric_limits<double>::infinity();
    double u = uniform_(engine_);
    return -std::log1p(-u) / rate;
  }

  bool bernoulli(double p) {
    if (p <= 0.0) return false;
    if (p >= 1.0) return true;
    return uniform_(engine_) < p;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace rng
}  // namespace tweezersim
