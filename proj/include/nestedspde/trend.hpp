#pragma once

#include "nestedspde/harmonics.hpp"
#include "nestedspde/types.hpp"

namespace nspde {

// Fixed-effect mean model Y = M mu + ... with a Gaussian prior on mu. The
// design is either empty, a single constant column, or a scalar-harmonic
// basis (sphere only). Prior defaults: zero mean, near-flat precision 1e-8 I.
struct TrendModel {
  enum class Kind { None, Constant, Harmonic };

  Kind kind = Kind::Constant;
  ScalarHarmonicBasis basis;  // Harmonic kind only
  Vec m_mu;                   // empty -> zeros
  Mat Q_mu;                   // empty -> 1e-8 I

  static TrendModel none();
  static TrendModel constant();
  static TrendModel harmonic(int max_order, bool axially_symmetric);

  Index dim() const;
  Mat design(const Mat& points) const;  // numPoints x dim()
  Vec priorMean() const;
  Mat priorPrecision() const;
};

}  // namespace nspde
