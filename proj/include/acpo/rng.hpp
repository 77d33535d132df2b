#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace acpo {

// splitmix64 finalizer; mixes (seed, stream id) pairs into fresh seeds so
// derived streams are decorrelated and reproducible.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic RNG. Normal draws use Box-Muller on our own uniforms so the
// byte stream does not depend on the standard library's distribution
// implementation.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // uniform in [0,1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n), n >= 1
  int uniform_int(int n) {
    return static_cast<int>(
        (static_cast<unsigned __int128>(gen_()) * static_cast<uint64_t>(n)) >> 64);
  }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Independent stream for (base seed of this rng, stream id). Derivation is
  // a pure function of the original seed, not of how much was drawn.
  Rng derive(uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  std::mt19937_64 gen_;
};

}  // namespace acpo
