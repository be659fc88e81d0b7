#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "mixflow/common/types.hpp"

namespace mixflow {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to derive independent sub-streams.
std::uint64_t mix_seed(std::uint64_t x);

// Deterministic sub-seed from a base seed and a list of stream coordinates,
// e.g. derive_seed(seed, {epoch, iteration, purpose}).
std::uint64_t derive_seed(std::uint64_t base,
                          std::initializer_list<std::uint64_t> coords);

std::uint64_t hash_string(const std::string& s);

Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng);

// Uniform in the open interval (0, 1).
double open_uniform(Rng& rng);

}  // namespace mixflow
