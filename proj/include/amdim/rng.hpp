#pragma once

#include <cstdint>

namespace amdim {

// Counter-based RNG. A stream is keyed by up to four 64-bit values
// (seed, epoch, image id, op index); the same key always yields the same
// stream regardless of how many other streams were drawn before it.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t k1 = 0, std::uint64_t k2 = 0,
                      std::uint64_t k3 = 0) {
    state_ = mix(seed + 0x7c1592a5c34d9f0dULL);
    state_ = mix(state_ ^ mix(k1 + 0x4cf5ad432745937fULL));
    state_ = mix(state_ ^ mix(k2 + 0x2545f4914f6cdd1dULL));
    state_ = mix(state_ ^ mix(k3 + 0x9e6c63d0876a9a47ULL));
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix(state_);
  }

  // uniform in [0, 1)
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  bool bernoulli(double p) { return next_double() < p; }

  // uniform integer in [0, n)
  std::uint64_t next_below(std::uint64_t n) { return n ? next_u64() % n : 0; }

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

}  // namespace amdim
