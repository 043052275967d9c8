#pragma once

#include <cstdint>
#include <string_view>

namespace ossod {

// Deterministic PRNG (splitmix64). The algorithm is fully specified here so
// seeded runs are bit-identical across platforms and standard-library
// versions; std::uniform_*_distribution makes no such promise.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

    std::uint64_t next();

    // Unbiased integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n);

    // Integer in [lo, hi] inclusive. lo must be <= hi.
    int range_int(int lo, int hi);

    // Double in [0, 1) with 53 random bits.
    double unit();

    // Double in [lo, hi).
    double range_real(double lo, double hi);

    bool chance(double p);  // true with probability clamp(p, 0, 1)

    // Independent stream derived from the *construction* seed and a label;
    // insensitive to how many draws this generator has made, so adding a
    // consumer in one code path cannot perturb another.
    Rng fork(std::uint64_t stream) const;
    Rng fork(std::string_view label) const;

  private:
    std::uint64_t seed_;
    std::uint64_t state_;
};

// splitmix64 finalizer, usable directly for hashing small keys into seeds.
std::uint64_t mix_seed(std::uint64_t x);
std::uint64_t hash_label(std::string_view label);

}  // namespace ossod
