#pragma once

#include <cstdint>
#include <vector>

#include "nestedspde/fem.hpp"
#include "nestedspde/mesh.hpp"
#include "nestedspde/operator_spec.hpp"

namespace nspde {

// Stiffness of one (kappa^2 - Laplacian) factor with the lumped mass matrix:
// K = diag(kappa2(s_j) c0_j) + G. Rejects nonpositive kappa2 node values.
SparseMat build_K(const TriangularMesh& mesh, const FemMatrices& fem,
                  const ParamField& kappa2);

// Precision of the innermost field w0, a palindromic product of the factor
// stiffness matrices interleaved with lumped-mass inverses. alpha = 1
// contributes a bare K, alpha = 2 contributes K Cbar^-1 K, and higher alpha
// wraps Q <- K Cbar^-1 Q Cbar^-1 K. The seed is Cbar when every alpha is
// even, otherwise the unique odd-alpha factor's K; that factor sits innermost
// and the remaining factors wrap in declaration order (first factor
// innermost). At most one factor may have odd alpha, since a second bare K
// has no symmetric slot in the product. Scaled by phi^-2.
SparseMat build_Q_x0(const TriangularMesh& mesh, const FemMatrices& fem,
                     const std::vector<L1Factor>& l1_factors, double phi);

// Loading matrix of the outer operator chain: w = H w0 with
// H = Cbar^-1 H_{n2} ... Cbar^-1 H_1 and
// H_i = diag(b_i(s_j) c0_j) + sum_k D^(k) diag(B_ik(s_j)).
// An empty chain yields the identity.
SparseMat build_H(const TriangularMesh& mesh, const FemMatrices& fem,
                  const std::vector<L2Factor>& l2_factors);

struct DiscretizedModel {
  const TriangularMesh* mesh = nullptr;
  SparseMat Q_x0;
  SparseMat H;
  SmoothnessInfo smoothness;
};

DiscretizedModel discretize(const TriangularMesh& mesh, const FemMatrices& fem,
                            const OperatorSystemSpec& spec);
DiscretizedModel discretize(const TriangularMesh& mesh,
                            const OperatorSystemSpec& spec);

// One realization mean + H w0, with w0 drawn from N(0, Q_x0^-1) by solving
// L^T x = z against the permuted Cholesky factor. mean may be empty (zero).
// Bit-reproducible for a fixed seed.
Vec simulate(const DiscretizedModel& model, const Vec& mean,
             std::uint64_t seed);

}  // namespace nspde
