#include "nestedspde/trend.hpp"

#include <string>

namespace nspde {

TrendModel TrendModel::none() {
  TrendModel t;
  t.kind = Kind::None;
  return t;
}

TrendModel TrendModel::constant() {
  TrendModel t;
  t.kind = Kind::Constant;
  return t;
}

TrendModel TrendModel::harmonic(int max_order, bool axially_symmetric) {
  TrendModel t;
  t.kind = Kind::Harmonic;
  t.basis = ScalarHarmonicBasis::make(max_order, axially_symmetric);
  return t;
}

Index TrendModel::dim() const {
  switch (kind) {
    case Kind::None:
      return 0;
    case Kind::Constant:
      return 1;
    case Kind::Harmonic:
      return basis.size();
  }
  return 0;
}

Mat TrendModel::design(const Mat& points) const {
  switch (kind) {
    case Kind::None:
      return Mat(points.rows(), 0);
    case Kind::Constant:
      return Mat::Ones(points.rows(), 1);
    case Kind::Harmonic:
      return eval_scalar_basis(basis, points);
  }
  return Mat(points.rows(), 0);
}

Vec TrendModel::priorMean() const {
  Index q = dim();
  if (m_mu.size() == 0) return Vec::Zero(q);
  if (m_mu.size() != q)
    throw ConfigError("trend prior mean has length " +
                      std::to_string(m_mu.size()) + ", expected " +
                      std::to_string(q));
  return m_mu;
}

Mat TrendModel::priorPrecision() const {
  Index q = dim();
  if (Q_mu.size() == 0) return 1e-8 * Mat::Identity(q, q);
  if (Q_mu.rows() != q || Q_mu.cols() != q)
    throw ConfigError("trend prior precision must be " + std::to_string(q) +
                      " x " + std::to_string(q));
  return Q_mu;
}

}  // namespace nspde
