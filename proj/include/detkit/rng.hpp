#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace detkit {

// Seedable generator with output that is identical on every platform.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the
// standard. The standard distributions are not portable, so the derived
// draws (bounded integers, unit reals, coin flips) are implemented here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  // Uniform real in [0, 1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // One draw is always consumed so the stream does not depend on p.
  bool bernoulli(double p) { return uniform01() < p; }

  // +1 or -1 with equal probability.
  int sign() { return (next_u64() >> 63) ? -1 : 1; }

 private:
  std::mt19937_64 engine_;
};

// SplitMix64 finalizer.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// FNV-1a over the bytes of s.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Per-item seed: global seed mixed with a hash of the item id.
inline std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view item_id) {
  return mix64(global_seed ^ mix64(fnv1a(item_id)));
}

}  // namespace detkit
