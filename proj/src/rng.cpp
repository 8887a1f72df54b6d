#include "vlminv/rng.hpp"

#include <string>

#include "vlminv/io.hpp"

namespace vlminv {

std::uint64_t derive_seed(std::uint64_t master, std::string_view component, std::uint64_t index) {
  const std::string key = std::string(component) + "|" + std::to_string(master) + "|" + std::to_string(index);
  const auto digest = sha256(key);
  std::uint64_t seed = 0;
  for (int i = 7; i >= 0; --i) seed = (seed << 8) | digest[static_cast<std::size_t>(i)];
  return seed;
}

Vector standard_normal(Index n, Rng& rng) {
  std::normal_distribution<Real> normal(0.0, 1.0);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

}  // namespace vlminv
