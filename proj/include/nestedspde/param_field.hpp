#pragma once

#include "nestedspde/harmonics.hpp"
#include "nestedspde/types.hpp"

namespace nspde {

// A (possibly spatially varying) model parameter. Scalar kinds: Constant or
// LogLinear (exponential of a spherical-harmonic expansion, hence positive).
// Vector kinds: Constant with a d-vector value or VectorLinear (vector
// spherical-harmonic expansion, sphere only).
class ParamField {
 public:
  enum class Kind { Constant, LogLinear, VectorLinear };

  ParamField() : kind_(Kind::Constant), value_(0.0) {}

  static ParamField constant(double value);
  static ParamField constantVector(const Vec& value);
  // A constant vector excluded from fitting (no packed-parameter slots);
  // evaluates exactly like constantVector.
  static ParamField fixedVector(const Vec& value);
  static ParamField logLinear(const ScalarHarmonicBasis& basis,
                              const Vec& coefficients);
  static ParamField vectorLinear(const VectorHarmonicBasis& basis,
                                 const Vec& coefficients);

  Kind kind() const { return kind_; }
  bool isConstant() const { return kind_ == Kind::Constant; }
  bool isVector() const { return kind_ == Kind::VectorLinear || vector_; }
  bool isFixed() const { return fixed_; }

  double constantValue() const;
  const Vec& constantVectorValue() const;

  const ScalarHarmonicBasis& scalarBasis() const;
  const VectorHarmonicBasis& vectorBasis() const;

  // Expansion coefficients (LogLinear / VectorLinear kinds).
  const Vec& coefficients() const;
  void setCoefficients(const Vec& coefficients);

  // Node values at the given points; scalar fields return numPoints values,
  // vector fields numPoints x dim. Harmonic kinds require 3-D unit points.
  Vec evalScalar(const Mat& points) const;
  Mat evalVector(const Mat& points) const;

 private:
  Kind kind_;
  bool vector_ = false;
  bool fixed_ = false;
  double value_ = 0.0;
  Vec vec_value_;
  ScalarHarmonicBasis sbasis_;
  VectorHarmonicBasis vbasis_;
  Vec coeffs_;
};

}  // namespace nspde
