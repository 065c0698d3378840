#pragma once

#include <cstdint>
#include <random>

#include "nestedspde/types.hpp"

namespace nspde {

// Standard-normal stream: Box-Muller over std::mt19937_64. Hand-rolled
// because std::normal_distribution's algorithm is implementation-defined,
// which would break bit-reproducibility across standard libraries.
class NormalRng {
 public:
  explicit NormalRng(std::uint64_t seed) : eng_(seed) {}

  double next();
  Vec vector(Index n);

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace nspde
