#pragma once

#include <utility>
#include <vector>

#include "nestedspde/types.hpp"

namespace nspde {

// Unnormalized associated Legendre function P_{k,m}(z) without the
// Condon-Shortley phase, by the stable m-diagonal recurrence.
double legendre_assoc(int k, int m, double z);

// Real spherical harmonic Y_{k,m}(s), orthonormal on the unit sphere. The
// m < 0 branch is sqrt(2) N_{k,m} sin(m l1) P_{k,|m|}(z) with the signed m
// inside the sine, so that dY_{k,m}/dl1 = m Y_{k,-m}.
double sph_harmonic(int k, int m, const Eigen::Vector3d& s);

// Vector spherical harmonics: family 1 is the tangential gradient of Y_{k,m},
// family 2 its cross product with s. Both are evaluated by closed forms that
// divide by 1 - z^2, so points within 1e-9 of a pole are rejected.
Eigen::Vector3d vsh(int family, int k, int m, const Eigen::Vector3d& s);

// Columns ordered k ascending, then m from -k to k. The axially symmetric
// variant keeps m = 0 only.
struct ScalarHarmonicBasis {
  int max_order = 0;
  bool axially_symmetric = false;
  std::vector<std::pair<int, int>> indices;  // (k, m)

  static ScalarHarmonicBasis make(int max_order, bool axially_symmetric);
  int size() const { return static_cast<int>(indices.size()); }
};

// Columns ordered k ascending (from 1), then m from -k to k, then family 1
// before family 2.
struct VectorHarmonicBasis {
  struct Key {
    int family;
    int k;
    int m;
  };

  int max_order = 1;
  bool axially_symmetric = false;
  std::vector<Key> indices;

  static VectorHarmonicBasis make(int max_order, bool axially_symmetric);
  int size() const { return static_cast<int>(indices.size()); }
};

// Evaluation matrix: entry (i, j) is basis function j at point i. Points are
// numPoints x 3 and must be unit vectors within 1e-6.
Mat eval_scalar_basis(const ScalarHarmonicBasis& basis, const Mat& points);

// One matrix per Cartesian component, each numPoints x size.
std::vector<Mat> eval_vector_basis(const VectorHarmonicBasis& basis,
                                   const Mat& points);

}  // namespace nspde
