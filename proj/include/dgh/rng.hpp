// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cmath>
#include <vector>

namespace dgh {

// Deterministic RNG with explicit distributions. std::random distributions are
// implementation-defined, so everything here is spelled out: seeds reproduce
// bit-identical streams on any platform.
class Rng {
public:
  explicit Rng(uint64_t seed) { state_ = splitmix(seed); }

  uint64_t u64() {
    // xorshift over a splitmix-initialized state
    state_ ^= state_ << 13;
    state_ ^= state_ >> 7;
    state_ ^= state_ << 17;
    return state_ * 0x2545F4914F6CDD1DULL;
  }

  // uniform in [0,1) with 53-bit resolution
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0,n)
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(uniform() * static_cast<double>(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller, second value cached
  double normal() {
    if (has_cache_) {
      has_cache_ = false;
      return cache_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.28318530717958647692 * u2;
    cache_ = r * std::sin(a);
    has_cache_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Independent child stream derived from (this stream's seed, tags).
  // Forking does not disturb the parent stream.
  Rng fork(uint64_t a, uint64_t b = 0, uint64_t c = 0) const {
    uint64_t s = state_;
    s = splitmix(s ^ (0x9E3779B97F4A7C15ULL + a));
    s = splitmix(s ^ (0xBF58476D1CE4E5B9ULL + b));
    s = splitmix(s ^ (0x94D049BB133111EBULL + c));
    return Rng(FromState{}, s);
  }

private:
  struct FromState {};
  Rng(FromState, uint64_t s) : state_(s ? s : 0x853C49E6748FEA9BULL) {}

  static uint64_t splitmix(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    x = x ^ (x >> 31);
    return x ? x : 0x853C49E6748FEA9BULL;
  }

  uint64_t state_;
  double cache_ = 0.0;
  bool has_cache_ = false;
};

}  // namespace dgh
