#pragma once

#include <cstdint>
#include <string_view>

namespace bsim {

/// Deterministic xoshiro256** generator with hand-rolled distributions.
/// The standard library distributions are implementation-defined, so every
/// draw here is spelled out to keep runs reproducible across platforms.
class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64();

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi);
    /// Uniform integer in [0, n), n > 0. Rejection sampling, no modulo bias.
    int64_t uniform_int(int64_t n);

    /// Standard normal via the polar method (one spare value cached).
    double normal();

    /// Gamma(alpha, 1) via Marsaglia-Tsang, with the u^(1/alpha) boost
    /// for alpha < 1. Valid for all alpha > 0.
    double gamma(double alpha);

    /// Beta(a, b) as g1 / (g1 + g2) from two gamma draws.
    double beta(double a, double b);

private:
    uint64_t s_[4];
    double spare_normal_ = 0.0;
    bool has_spare_ = false;
};

uint64_t splitmix64(uint64_t& state);

/// Derives an independent, reproducible stream from (seed, tag, index).
/// Streams with distinct tags never share state, which lets e.g. the
/// mixing-region draws advance without disturbing the view-augmentation
/// sequence.
Rng derive_rng(uint64_t seed, std::string_view tag, uint64_t index);

}  // namespace bsim
