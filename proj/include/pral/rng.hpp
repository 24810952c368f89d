#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace pral {

// mt19937_64 output is fixed by the standard; the helpers below avoid the
// implementation-defined std:: distributions so streams are portable.
using Rng = std::mt19937_64;

// Derives an independent sub-seed from a root seed and a label.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);

// Uniform integer in [0, n). n must be > 0.
std::uint64_t uniform_index(Rng& rng, std::uint64_t n);

// Uniform real in [0, 1).
double uniform_unit(Rng& rng);

// Standard normal draw (Box-Muller).
double standard_normal(Rng& rng);

}  // namespace pral
