#include "nestedspde/param_field.hpp"

#include <string>

namespace nspde {

ParamField ParamField::constant(double value) {
  ParamField f;
  f.kind_ = Kind::Constant;
  f.value_ = value;
  return f;
}

ParamField ParamField::constantVector(const Vec& value) {
  ParamField f;
  f.kind_ = Kind::Constant;
  f.vector_ = true;
  f.vec_value_ = value;
  return f;
}

ParamField ParamField::fixedVector(const Vec& value) {
  ParamField f = constantVector(value);
  f.fixed_ = true;
  return f;
}

ParamField ParamField::logLinear(const ScalarHarmonicBasis& basis,
                                 const Vec& coefficients) {
  if (coefficients.size() != basis.size())
    throw ConfigError("log-linear field expects " +
                      std::to_string(basis.size()) + " coefficients, got " +
                      std::to_string(coefficients.size()));
  ParamField f;
  f.kind_ = Kind::LogLinear;
  f.sbasis_ = basis;
  f.coeffs_ = coefficients;
  return f;
}

ParamField ParamField::vectorLinear(const VectorHarmonicBasis& basis,
                                    const Vec& coefficients) {
  if (coefficients.size() != basis.size())
    throw ConfigError("vector-linear field expects " +
                      std::to_string(basis.size()) + " coefficients, got " +
                      std::to_string(coefficients.size()));
  ParamField f;
  f.kind_ = Kind::VectorLinear;
  f.vector_ = true;
  f.vbasis_ = basis;
  f.coeffs_ = coefficients;
  return f;
}

double ParamField::constantValue() const {
  if (kind_ != Kind::Constant || vector_)
    throw ConfigError("parameter field is not a scalar constant");
  return value_;
}

const Vec& ParamField::constantVectorValue() const {
  if (kind_ != Kind::Constant || !vector_)
    throw ConfigError("parameter field is not a constant vector");
  return vec_value_;
}

const ScalarHarmonicBasis& ParamField::scalarBasis() const {
  if (kind_ != Kind::LogLinear)
    throw ConfigError("parameter field has no scalar harmonic basis");
  return sbasis_;
}

const VectorHarmonicBasis& ParamField::vectorBasis() const {
  if (kind_ != Kind::VectorLinear)
    throw ConfigError("parameter field has no vector harmonic basis");
  return vbasis_;
}

const Vec& ParamField::coefficients() const {
  if (kind_ == Kind::Constant)
    throw ConfigError("constant parameter field has no coefficients");
  return coeffs_;
}

void ParamField::setCoefficients(const Vec& coefficients) {
  if (kind_ == Kind::Constant)
    throw ConfigError("constant parameter field has no coefficients");
  if (coefficients.size() != coeffs_.size())
    throw ConfigError("coefficient count mismatch");
  coeffs_ = coefficients;
}

Vec ParamField::evalScalar(const Mat& points) const {
  if (vector_) throw ConfigError("vector field evaluated as a scalar");
  switch (kind_) {
    case Kind::Constant:
      return Vec::Constant(points.rows(), value_);
    case Kind::LogLinear:
      return (eval_scalar_basis(sbasis_, points) * coeffs_).array().exp();
    default:
      throw ConfigError("vector field evaluated as a scalar");
  }
}

Mat ParamField::evalVector(const Mat& points) const {
  if (!vector_ && kind_ != Kind::VectorLinear)
    throw ConfigError("scalar field evaluated as a vector");
  if (kind_ == Kind::Constant)
    return vec_value_.transpose().replicate(points.rows(), 1);
  auto comps = eval_vector_basis(vbasis_, points);
  Mat out(points.rows(), 3);
  for (int d = 0; d < 3; ++d) out.col(d) = comps[d] * coeffs_;
  return out;
}

}  // namespace nspde
