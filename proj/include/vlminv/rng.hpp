#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "vlminv/core.hpp"

namespace vlminv {

using Rng = std::mt19937_64;

/// Per-component seed: the first 8 bytes (little endian) of
/// SHA-256("<component>|<master>|<index>").
std::uint64_t derive_seed(std::uint64_t master, std::string_view component, std::uint64_t index = 0);

Vector standard_normal(Index n, Rng& rng);

}  // namespace vlminv
