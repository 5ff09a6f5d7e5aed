#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace dfr {

// Counter-style deterministic RNG (splitmix64 core) with explicit stream
// forking, so evaluation task t draws the same samples no matter which worker
// runs it or how many tasks ran before. Distributions are hand-rolled to keep
// byte-level reproducibility independent of the standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(mix(seed ^ 0x6A09E667F3BCC909ull)) {}

  // Independent stream keyed by (this stream, id); forking does not advance
  // the parent state.
  Rng fork(uint64_t id) const {
    Rng r(0);
    r.state_ = mix(state_ ^ mix(id * 0x9E3779B97F4A7C15ull + 0x243F6A8885A308D3ull));
    return r;
  }

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    return mix(state_);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n), unbiased
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    const uint64_t bound = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return static_cast<int>(v % bound);
  }

  // Box-Muller, one draw per call
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = last - first;
    for (auto i = n - 1; i > 0; --i) {
      const auto j = uniform_int(static_cast<int>(i + 1));
      std::swap(first[i], first[j]);
    }
  }

 private:
  static uint64_t mix(uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  uint64_t state_;
};

}  // namespace dfr
