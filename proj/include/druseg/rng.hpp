#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <initializer_list>

#include "druseg/common.hpp"

namespace druseg {

// Deterministic pseudo-random generator: xoshiro256** seeded via splitmix64.
// The exact algorithms are pinned so that seeded runs are bit-reproducible
// across builds and platforms:
//   - state is seeded from four consecutive splitmix64 outputs of the seed
//   - unit doubles take the top 53 bits: (next() >> 11) * 2^-53, in [0, 1)
//   - gaussians use the Marsaglia polar transform with a cached spare
//   - derived streams rescramble the parent seed with splitmix64, one round
//     per tag, so (seed, tag...) names a stream independent of call order
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
  }

  std::uint64_t seed() const { return seed_; }

  // Next raw 64-bit value (xoshiro256**).
  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform double in [0, 1).
  double unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform double in [lo, hi). Degenerate ranges (lo == hi) return lo.
  double uniform(double lo, double hi) {
    if (!(lo <= hi)) throw ValueError("uniform: lo must be <= hi");
    return lo + unit() * (hi - lo);
  }

  // Uniform integer in [0, n). n must be positive. Uses rejection sampling so
  // every value is exactly equally likely.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ValueError("below: n must be positive");
    const std::uint64_t limit = ~std::uint64_t{0} - ~std::uint64_t{0} % n;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  // Normal sample via the Marsaglia polar method. std == 0 yields mean
  // exactly and consumes no generator state.
  double gaussian(double mean, double std) {
    if (std < 0.0) throw ValueError("gaussian: std must be >= 0");
    if (std == 0.0) return mean;
    return mean + std * standard_normal();
  }

  double standard_normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * unit() - 1.0;
      v = 2.0 * unit() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
  }

  // Independent child stream named by (parent seed, tags...).
  Rng derive(std::initializer_list<std::uint64_t> tags) const {
    std::uint64_t s = seed_;
    for (std::uint64_t t : tags) s = rescramble(s, t);
    return Rng(s);
  }
  Rng derive(std::uint64_t tag) const { return derive({tag}); }

  // Full serializable state: 4 state words, spare flag, spare payload bits.
  std::array<std::uint64_t, 6> save_state() const {
    return {state_[0], state_[1], state_[2], state_[3],
            has_spare_ ? std::uint64_t{1} : std::uint64_t{0},
            std::bit_cast<std::uint64_t>(spare_)};
  }

  void restore_state(const std::array<std::uint64_t, 6>& s) {
    state_ = {s[0], s[1], s[2], s[3]};
    has_spare_ = s[4] != 0;
    spare_ = std::bit_cast<double>(s[5]);
  }

  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  static std::uint64_t rescramble(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t x = seed ^ (0x9e3779b97f4a7c15ULL * (tag + 1));
    return splitmix64(x);
  }

  std::uint64_t seed_ = 0;
  std::array<std::uint64_t, 4> state_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace druseg
