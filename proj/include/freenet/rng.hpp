#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "freenet/common.hpp"

namespace freenet {

// Portable random numbers.  The standard library's distributions and
// std::shuffle are implementation-defined, so everything that must reproduce
// bit-for-bit across toolchains is built from two fixed algorithms:
//
//   * SplitMix64 turns (seed, tag-a, tag-b) into independent stream states.
//   * xoshiro256** generates the stream itself.
//
// Gaussians come from Box-Muller, shuffles from Fisher-Yates, and bounded
// integers from rejection sampling -- all spelled out here so the sequences
// are frozen.

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
}  // namespace detail

class Rng {
 public:
  explicit Rng(std::uint64_t seed) { seed_state(seed); }

  // Independent stream derived from (seed, a, b); used as e.g.
  // (seed, epoch, class) for the sampler and (seed, tag, index) for init.
  static Rng stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    std::uint64_t mix = seed;
    std::uint64_t h = detail::splitmix64(mix);
    mix ^= a + 0x9e3779b97f4a7c15ULL * (h | 1);
    h = detail::splitmix64(mix);
    mix ^= b + 0x9e3779b97f4a7c15ULL * (h | 1);
    Rng r(0);
    r.seed_state(mix);
    return r;
  }

  std::uint64_t next_u64() {
    // xoshiro256**
    const std::uint64_t result = detail::rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = detail::rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Unbiased integer in [0, bound) by rejection on the top 32 bits.
  std::uint32_t below(std::uint32_t bound) {
    if (bound == 0) throw DomainError("Rng::below: bound must be positive");
    std::uint32_t x, r;
    do {
      x = static_cast<std::uint32_t>(next_u64() >> 32);
      r = x % bound;
    } while (x - r > UINT32_MAX - (bound - 1));
    return r;
  }

  // Standard normal via Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = next_double();
    } while (u1 <= 0.0);
    u2 = next_double();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    const double two_pi = 6.283185307179586476925286766559;
    spare_ = mag * std::sin(two_pi * u2);
    has_spare_ = true;
    return mag * std::cos(two_pi * u2);
  }

  // Fisher-Yates, descending, using below() -- the only portable shuffle here.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = below(static_cast<std::uint32_t>(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  void seed_state(std::uint64_t seed) {
    std::uint64_t mix = seed;
    for (auto& word : s_) word = detail::splitmix64(mix);
    // xoshiro must not start from the all-zero state; splitmix64 of any seed
    // never yields four zero words, but keep the guard explicit.
    if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 1;
  }

  std::uint64_t s_[4] = {};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace freenet
