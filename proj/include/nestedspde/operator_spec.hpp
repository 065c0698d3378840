#pragma once

#include <vector>

#include "nestedspde/param_field.hpp"
#include "nestedspde/types.hpp"

namespace nspde {

// One factor (kappa^2 - Laplacian)^(alpha/2) of the inner operator.
struct L1Factor {
  ParamField kappa2;
  int alpha = 2;
};

// One factor (b + B . grad) of the outer operator. Zero b is allowed only
// when explicitly requested; fitting always keeps b positive.
struct L2Factor {
  ParamField b;
  ParamField B;  // vector field; constant zero vector means no advection
  bool allow_zero_b = false;
};

// The full operator system driving the field: the inner product of L1
// factors applied to the latent field, the outer product of L2 factors
// mapping it to the observed field, and the noise scale phi.
struct OperatorSystemSpec {
  std::vector<L1Factor> l1_factors;
  std::vector<L2Factor> l2_factors;
  double phi = 1.0;

  int n1() const { return static_cast<int>(l1_factors.size()); }
  int n2() const { return static_cast<int>(l2_factors.size()); }
  int alphaSum() const;
  bool isStationary() const;

  // dim is the ambient dimension (2 for planar meshes, 3 for the sphere).
  void validate(int dim) const;
};

struct SmoothnessInfo {
  bool continuous = false;
  int max_continuous_derivative = -1;
};

// Sample-path regularity from the total operator order: the field is
// continuous iff 2 sum(alpha) - 2 n2 > d, and has m continuous derivatives
// iff 2 sum(alpha) - 2 n2 - d > m.
SmoothnessInfo smoothness_check(const OperatorSystemSpec& spec, int d);

}  // namespace nspde
