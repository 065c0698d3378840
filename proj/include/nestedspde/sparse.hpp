#pragma once

#include <vector>

#include "nestedspde/types.hpp"

namespace nspde {

enum class Ordering { Amd, Natural };

// Sparse symmetric positive-definite matrix; lower triangle in compressed
// column form. Symmetry holds by construction: only the lower triangle of
// the input is read.
class SparseSym {
 public:
  SparseSym() = default;
  explicit SparseSym(const SparseMat& full);

  Index size() const { return lower_.rows(); }
  const SparseMat& lower() const { return lower_; }
  SparseMat full() const;

 private:
  SparseMat lower_;
};

// Cholesky factor of P Q Pᵀ = L Lᵀ with P a fill-reducing permutation.
// perm()[k] is the original index sitting at permuted slot k.
class CholeskyFactor {
 public:
  Index size() const { return L_.rows(); }
  const SparseMat& matrixL() const { return L_; }
  const std::vector<int>& perm() const { return perm_; }

  Vec solve(const Vec& b) const;         // Q⁻¹ b
  Vec forwardSolve(const Vec& b) const;  // L⁻¹ P b; ‖·‖² is bᵀ Q⁻¹ b
  Vec backSolve(const Vec& z) const;     // Pᵀ L⁻ᵀ z; maps N(0,I) to N(0,Q⁻¹)
  Vec diagonal() const;                  // diag(L) in factor order
  double logdet() const;                 // log|Q| = 2 Σ log L_kk

 private:
  friend class CholeskySolver;
  SparseMat L_;
  std::vector<int> perm_;
};

// Symbolic analysis (ordering, elimination tree, column counts) computed once
// per sparsity pattern; factorize() reuses it across value changes.
class CholeskySolver {
 public:
  void analyze(const SparseSym& Q, Ordering ordering = Ordering::Amd);
  bool analyzed() const { return n_ >= 0; }
  Index lnonzeros() const { return lnz_; }

  // Numeric factorization; throws NumericError naming the failing pivot if Q
  // is not positive definite. The pattern must match the analyzed one.
  CholeskyFactor factorize(const SparseSym& Q) const;

 private:
  Index n_ = -1;
  Index lnz_ = 0;
  std::vector<int> perm_;     // slot -> original index
  std::vector<int> iperm_;    // original index -> slot
  std::vector<int> parent_;   // elimination tree
  std::vector<int> Cp_, Ci_;  // permuted upper-triangle pattern
  std::vector<int> Lp_;       // column pointers of L
  std::vector<int> map_;      // input nonzero slot -> position in C values
  std::vector<int> in_outer_, in_inner_;  // analyzed input pattern
};

CholeskyFactor cholesky(const SparseSym& Q, Ordering ordering = Ordering::Amd);

// 2 Σᵢ (log La,(i) − log Lb,(i)) with both diagonals sorted ascending and the
// pairwise differences accumulated in order of increasing magnitude. Stable
// when the two determinants are astronomically large yet nearly equal.
double logdet_diff(const CholeskyFactor& a, const CholeskyFactor& b);

}  // namespace nspde
