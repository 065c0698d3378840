#include "nestedspde/harmonics.hpp"

#include <cmath>
#include <string>

namespace nspde {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_unit(const Eigen::Vector3d& s, double tol) {
  if (std::abs(s.norm() - 1.0) > tol)
    throw DataError("point (" + std::to_string(s.x()) + ", " +
                    std::to_string(s.y()) + ", " + std::to_string(s.z()) +
                    ") is not on the unit sphere");
}

// sqrt((2k+1)/(4 pi) * (k-|m|)!/(k+|m|)!)
double harmonic_norm(int k, int m) {
  int am = std::abs(m);
  double ratio = 1.0;
  for (int i = k - am + 1; i <= k + am; ++i) ratio *= i;
  return std::sqrt((2 * k + 1) / (4.0 * kPi * ratio));
}

}  // namespace

double legendre_assoc(int k, int m, double z) {
  if (m < 0 || m > k)
    throw ConfigError("legendre_assoc index out of range: k=" +
                      std::to_string(k) + ", m=" + std::to_string(m));
  double pmm = 1.0;
  if (m > 0) {
    double somx2 = std::sqrt(std::max(0.0, (1.0 - z) * (1.0 + z)));
    double fact = 1.0;
    for (int i = 0; i < m; ++i) {
      pmm *= fact * somx2;
      fact += 2.0;
    }
  }
  if (k == m) return pmm;
  double pmmp1 = (2 * m + 1) * z * pmm;
  if (k == m + 1) return pmmp1;
  double pkm = 0.0;
  for (int kk = m + 2; kk <= k; ++kk) {
    pkm = ((2 * kk - 1) * z * pmmp1 - (kk - 1 + m) * pmm) / (kk - m);
    pmm = pmmp1;
    pmmp1 = pkm;
  }
  return pkm;
}

double sph_harmonic(int k, int m, const Eigen::Vector3d& s) {
  if (k < 0 || std::abs(m) > k)
    throw ConfigError("sph_harmonic index out of range: k=" +
                      std::to_string(k) + ", m=" + std::to_string(m));
  check_unit(s, 1e-9);
  double z = s.z();
  double p = legendre_assoc(k, std::abs(m), z);
  double norm = harmonic_norm(k, m);
  if (m == 0) return norm * p;
  double l1 = std::atan2(s.y(), s.x());
  double angular = m > 0 ? std::cos(m * l1) : std::sin(m * l1);
  return std::sqrt(2.0) * norm * angular * p;
}

Eigen::Vector3d vsh(int family, int k, int m, const Eigen::Vector3d& s) {
  if (family != 1 && family != 2)
    throw ConfigError("vsh family must be 1 or 2");
  if (k < 1 || std::abs(m) > k)
    throw ConfigError("vsh index out of range: k=" + std::to_string(k) +
                      ", m=" + std::to_string(m));
  check_unit(s, 1e-9);
  double x = s.x(), y = s.y(), z = s.z();
  if (std::abs(z) >= 1.0 - 1e-9)
    throw DataError(
        "vector spherical harmonic evaluated within 1e-9 of a pole (z=" +
        std::to_string(z) + ")");

  double ykm = sph_harmonic(k, m, s);
  double ykneg = sph_harmonic(k, -m, s);
  double ck = 0.0, yk1 = 0.0;
  if (std::abs(m) <= k - 1) {
    ck = std::sqrt((2.0 * k + 1) * (double(k) * k - double(m) * m) /
                   (2.0 * k - 1));
    yk1 = sph_harmonic(k - 1, m, s);
  }
  double w = 1.0 - z * z;
  Eigen::Vector3d v;
  if (family == 1) {
    v << -m * y * ykneg - ck * x * z * yk1 + k * x * z * z * ykm,
        m * x * ykneg - ck * y * z * yk1 + k * y * z * z * ykm,
        ck * w * yk1 - w * k * z * ykm;
  } else {
    v << k * z * y * ykm - ck * y * yk1 + m * z * x * ykneg,
        -k * x * z * ykm + ck * x * yk1 + m * y * z * ykneg,
        -m * w * ykneg;
  }
  return v / w;
}

ScalarHarmonicBasis ScalarHarmonicBasis::make(int max_order,
                                              bool axially_symmetric) {
  if (max_order < 0 || max_order > 12)
    throw ConfigError("scalar harmonic max_order must be in [0, 12], got " +
                      std::to_string(max_order));
  ScalarHarmonicBasis basis;
  basis.max_order = max_order;
  basis.axially_symmetric = axially_symmetric;
  for (int k = 0; k <= max_order; ++k) {
    if (axially_symmetric) {
      basis.indices.emplace_back(k, 0);
    } else {
      for (int m = -k; m <= k; ++m) basis.indices.emplace_back(k, m);
    }
  }
  return basis;
}

VectorHarmonicBasis VectorHarmonicBasis::make(int max_order,
                                              bool axially_symmetric) {
  if (max_order < 1 || max_order > 12)
    throw ConfigError("vector harmonic max_order must be in [1, 12], got " +
                      std::to_string(max_order));
  VectorHarmonicBasis basis;
  basis.max_order = max_order;
  basis.axially_symmetric = axially_symmetric;
  for (int k = 1; k <= max_order; ++k) {
    if (axially_symmetric) {
      basis.indices.push_back({1, k, 0});
      basis.indices.push_back({2, k, 0});
    } else {
      for (int m = -k; m <= k; ++m) {
        basis.indices.push_back({1, k, m});
        basis.indices.push_back({2, k, m});
      }
    }
  }
  return basis;
}

namespace {

Eigen::Vector3d unit_point(const Mat& points, Index i) {
  if (points.cols() != 3)
    throw DataError("harmonic basis points must have 3 columns");
  Eigen::Vector3d s = points.row(i).transpose();
  double r = s.norm();
  if (std::abs(r - 1.0) > 1e-6)
    throw DataError("point " + std::to_string(i) +
                    " is not on the unit sphere (norm " + std::to_string(r) +
                    ")");
  return s / r;
}

}  // namespace

Mat eval_scalar_basis(const ScalarHarmonicBasis& basis, const Mat& points) {
  Mat out(points.rows(), basis.size());
  for (Index i = 0; i < points.rows(); ++i) {
    Eigen::Vector3d s = unit_point(points, i);
    for (int j = 0; j < basis.size(); ++j)
      out(i, j) = sph_harmonic(basis.indices[j].first, basis.indices[j].second, s);
  }
  return out;
}

std::vector<Mat> eval_vector_basis(const VectorHarmonicBasis& basis,
                                   const Mat& points) {
  std::vector<Mat> out(3, Mat(points.rows(), basis.size()));
  for (Index i = 0; i < points.rows(); ++i) {
    Eigen::Vector3d s = unit_point(points, i);
    for (int j = 0; j < basis.size(); ++j) {
      const auto& key = basis.indices[j];
      Eigen::Vector3d v = vsh(key.family, key.k, key.m, s);
      for (int d = 0; d < 3; ++d) out[d](i, j) = v[d];
    }
  }
  return out;
}

}  // namespace nspde
