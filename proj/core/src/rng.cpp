#include "ossod/rng.hpp"

#include <limits>

namespace ossod {

namespace {

std::uint64_t finalize(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t x) {
    return finalize(x + 0x9E3779B97F4A7C15ull);
}

std::uint64_t hash_label(std::string_view label) {
    // FNV-1a, then one splitmix round to spread the low bits.
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : label) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return finalize(h);
}

std::uint64_t Rng::next() {
    state_ += 0x9E3779B97F4A7C15ull;
    return finalize(state_);
}

std::uint64_t Rng::below(std::uint64_t n) {
    // Rejection sampling to avoid modulo bias.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v = next();
    while (v >= limit) v = next();
    return v % n;
}

int Rng::range_int(int lo, int hi) {
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi) - static_cast<std::uint64_t>(lo) + 1));
}

double Rng::unit() {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
}

double Rng::range_real(double lo, double hi) {
    return lo + (hi - lo) * unit();
}

bool Rng::chance(double p) {
    if (p <= 0.0) return false;
    if (p >= 1.0) return true;
    return unit() < p;
}

Rng Rng::fork(std::uint64_t stream) const {
    return Rng(finalize(seed_ ^ mix_seed(stream)));
}

Rng Rng::fork(std::string_view label) const {
    return fork(hash_label(label));
}

}  // namespace ossod
