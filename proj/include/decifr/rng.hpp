#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace decifr {

// splitmix64; used to derive independent seed streams from a master seed.
inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Derive a child seed from a master seed and a textual stream tag.
// Deterministic across platforms; distinct tags give independent streams.
inline uint64_t derive_seed(uint64_t master, std::string_view tag) {
  uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(master ^ mix64(h));
}

inline uint64_t derive_seed(uint64_t master, std::string_view tag, uint64_t index) {
  return mix64(derive_seed(master, tag) ^ mix64(index * 0x9e3779b97f4a7c15ULL + 1));
}

// Deterministic distributions on top of mt19937_64. The standard library's
// distribution objects are implementation-defined, so we roll the few we
// need to keep artifacts byte-reproducible.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(uniform() * (static_cast<double>(hi) - lo + 1));
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Poisson sample; Knuth product method for small lambda, rounded normal
  // approximation above that (adequate for the shot-noise regime here).
  long poisson(double lambda) {
    if (lambda <= 0.0) return 0;
    if (lambda < 30.0) {
      double limit = std::exp(-lambda);
      double prod = uniform();
      long n = 0;
      while (prod > limit) {
        ++n;
        prod *= uniform();
      }
      return n;
    }
    double n = std::round(lambda + std::sqrt(lambda) * normal());
    return n < 0.0 ? 0 : static_cast<long>(n);
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace decifr
