// rng.hpp -- deterministic 64-bit RNG with fully pinned streams.
//
// splitmix64 is specified here rather than delegated to <random> so that
// sampled streams are identical across standard libraries and builds.
#pragma once

#include <cstdint>

namespace rpmlab {

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // [0, n), n > 0
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>((static_cast<unsigned __int128>(next_u64()) *
                                 static_cast<unsigned __int128>(n)) >> 64);
  }

  // Derives an independent stream for (seed, index) pairs, e.g. one stream
  // per generated puzzle instance.
  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t z = a ^ (b * 0xff51afd7ed558ccdull + 0x2545f4914f6cdd1dull);
    z = (z ^ (z >> 33)) * 0xc4ceb9fe1a85ec53ull;
    z = (z ^ (z >> 29)) * 0x94d049bb133111ebull;
    return z ^ (z >> 32);
  }

 private:
  uint64_t state_;
};

}  // namespace rpmlab
