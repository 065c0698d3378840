#pragma once

#include <vector>

#include "nestedspde/mesh.hpp"
#include "nestedspde/types.hpp"

namespace nspde {

// Piecewise-linear FEM matrices over the mesh nodes:
//   C    mass matrix            ⟨φ_i, φ_j⟩
//   c0   lumped mass (row sums of C), used as the diagonal C̄
//   G    stiffness matrix       ⟨∇φ_i, ∇φ_j⟩
//   D[k] directional matrices   ⟨φ_i, ∂φ_j/∂s_k⟩, one per coordinate
// Gradients are tangential on the sphere (flat-triangle geometry).
struct FemMatrices {
  SparseMat C;
  Vec c0;
  SparseMat G;
  std::vector<SparseMat> D;
};

FemMatrices assemble(const TriangularMesh& mesh);

// Sparse basis evaluation matrix: Phi(i, j) = φ_j(point_i), at most three
// nonzeros per row (barycentric weights of the containing triangle).
struct BasisEvaluation {
  SparseMat Phi;
  std::vector<int> triangle;  // containing triangle per point
};

enum class LocateStrategy { WalkWithFallback, BruteForce };

// Points are numPoints x dim. Planar points must lie inside the mesh; sphere
// points must be unit vectors within 1e-6 (they are re-normalized).
BasisEvaluation evaluate_basis(const TriangularMesh& mesh, const Mat& points,
                               LocateStrategy strategy = LocateStrategy::WalkWithFallback);

}  // namespace nspde
