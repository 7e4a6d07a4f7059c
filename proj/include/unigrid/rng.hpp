#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>

namespace unigrid {

// xoshiro256** seeded through splitmix64. Self-contained so that streams are
// reproducible bit-for-bit across platforms and serializable into checkpoints,
// which std::mt19937 does not guarantee across library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1), clamped away from 0 so log(u) is finite.
  double uniform_open() {
    double u = uniform();
    if (u < 1e-10) u = 1e-10;
    if (u > 1.0 - 1e-7) u = 1.0 - 1e-7;
    return u;
  }

  // Gumbel(0,1) via -log(-log(u)).
  double gumbel() { return -std::log(-std::log(uniform_open())); }

  double normal() {
    // Box-Muller, one value per call (the spare is discarded to keep the
    // stream position independent of call parity).
    double u1 = uniform_open();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Integer in [0, n).
  uint64_t below(uint64_t n) { return next_u64() % n; }

  // Deterministic child stream: used for per-rollout / per-task seeding.
  static uint64_t derive_seed(uint64_t base, uint64_t index) {
    uint64_t x = base ^ (0x9e3779b97f4a7c15ULL + index);
    return splitmix64(x);
  }

  std::array<uint64_t, 4> state() const { return state_; }
  void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<uint64_t, 4> state_{};
};

}  // namespace unigrid
