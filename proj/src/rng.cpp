#include "nestedspde/rng.hpp"

#include <cmath>

namespace nspde {

namespace {
constexpr double kTwoPi = 6.28318530717958647692;
}

double NormalRng::next() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  // 53-bit uniforms; u1 lies in (0, 1] so the log stays finite.
  double u1 = 1.0 - (eng_() >> 11) * 0x1.0p-53;
  double u2 = (eng_() >> 11) * 0x1.0p-53;
  double r = std::sqrt(-2.0 * std::log(u1));
  spare_ = r * std::sin(kTwoPi * u2);
  have_spare_ = true;
  return r * std::cos(kTwoPi * u2);
}

Vec NormalRng::vector(Index n) {
  Vec out(n);
  for (Index i = 0; i < n; ++i) out[i] = next();
  return out;
}

}  // namespace nspde
