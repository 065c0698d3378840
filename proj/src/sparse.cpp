#include "nestedspde/sparse.hpp"

#include <Eigen/OrderingMethods>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace nspde {

SparseSym::SparseSym(const SparseMat& full) {
  if (full.rows() != full.cols())
    throw std::invalid_argument("SparseSym: matrix must be square");
  lower_ = full.triangularView<Eigen::Lower>();
  lower_.makeCompressed();
}

SparseMat SparseSym::full() const {
  SparseMat f = lower_.selfadjointView<Eigen::Lower>();
  f.makeCompressed();
  return f;
}

void CholeskySolver::analyze(const SparseSym& Q, Ordering ordering) {
  const SparseMat& A = Q.lower();
  const Index n = A.rows();
  n_ = n;

  perm_.resize(n);
  if (ordering == Ordering::Amd && n > 0) {
    Eigen::AMDOrdering<int> amd;
    Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, int> p;
    amd(A.selfadjointView<Eigen::Lower>(), p);
    for (Index k = 0; k < n; ++k) perm_[k] = p.indices()[k];
  } else {
    std::iota(perm_.begin(), perm_.end(), 0);
  }
  iperm_.resize(n);
  for (Index k = 0; k < n; ++k) iperm_[perm_[k]] = static_cast<int>(k);

  in_outer_.assign(A.outerIndexPtr(), A.outerIndexPtr() + n + 1);
  in_inner_.assign(A.innerIndexPtr(), A.innerIndexPtr() + A.nonZeros());

  // Permuted upper-triangle pattern C with sorted columns; map_ sends each
  // input nonzero to its slot in C's value array.
  const Index nnz = A.nonZeros();
  std::vector<int> ccount(n, 0);
  std::vector<int> crow(nnz), ccol(nnz);
  {
    Index k = 0;
    for (Index j = 0; j < n; ++j) {
      for (SparseMat::InnerIterator it(A, j); it; ++it, ++k) {
        int a = iperm_[it.row()];
        int b = iperm_[it.col()];
        crow[k] = std::min(a, b);
        ccol[k] = std::max(a, b);
        ++ccount[ccol[k]];
      }
    }
  }
  Cp_.assign(n + 1, 0);
  for (Index j = 0; j < n; ++j) Cp_[j + 1] = Cp_[j] + ccount[j];
  Ci_.assign(nnz, 0);
  map_.assign(nnz, 0);
  {
    // Two-pass bucket fill keeps row indices sorted within each column:
    // first order input slots by (column, row), then place.
    std::vector<int> order(nnz);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int x, int y) {
      return ccol[x] != ccol[y] ? ccol[x] < ccol[y] : crow[x] < crow[y];
    });
    std::vector<int> next(Cp_.begin(), Cp_.end() - 1);
    for (int k : order) {
      int pos = next[ccol[k]]++;
      Ci_[pos] = crow[k];
      map_[k] = pos;
    }
  }

  // Elimination tree of C (Liu's algorithm with path compression).
  parent_.assign(n, -1);
  std::vector<int> ancestor(n, -1);
  for (Index k = 0; k < n; ++k) {
    for (int p = Cp_[k]; p < Cp_[k + 1]; ++p) {
      int i = Ci_[p];
      while (i != -1 && i < static_cast<int>(k)) {
        int inext = ancestor[i];
        ancestor[i] = static_cast<int>(k);
        if (inext == -1) parent_[i] = static_cast<int>(k);
        i = inext;
      }
    }
  }

  // Column counts of L by traversing each row's reach in the etree.
  std::vector<int> count(n, 1);  // diagonal entries
  std::vector<int> stamp(n, -1);
  for (Index k = 0; k < n; ++k) {
    stamp[k] = static_cast<int>(k);
    for (int p = Cp_[k]; p < Cp_[k + 1]; ++p) {
      int i = Ci_[p];
      while (i != -1 && stamp[i] != static_cast<int>(k)) {
        ++count[i];
        stamp[i] = static_cast<int>(k);
        i = parent_[i];
      }
    }
  }
  Lp_.assign(n + 1, 0);
  for (Index j = 0; j < n; ++j) Lp_[j + 1] = Lp_[j] + count[j];
  lnz_ = Lp_[n];
}

CholeskyFactor CholeskySolver::factorize(const SparseSym& Q) const {
  if (n_ < 0) throw std::invalid_argument("CholeskySolver: analyze() first");
  const SparseMat& A = Q.lower();
  const Index n = A.rows();
  if (n != n_ || A.nonZeros() != static_cast<Index>(in_inner_.size()) ||
      !std::equal(in_outer_.begin(), in_outer_.end(), A.outerIndexPtr()) ||
      !std::equal(in_inner_.begin(), in_inner_.end(), A.innerIndexPtr()))
    throw std::invalid_argument(
        "CholeskySolver: pattern differs from the analyzed one");

  std::vector<double> Cx(A.nonZeros(), 0.0);
  const double* av = A.valuePtr();
  for (size_t k = 0; k < map_.size(); ++k) Cx[map_[k]] = av[k];

  CholeskyFactor f;
  f.perm_ = perm_;
  f.L_.resize(n, n);
  f.L_.reserve(lnz_);
  std::vector<int> Li(lnz_);
  std::vector<double> Lx(lnz_);
  std::vector<int> c(Lp_.begin(), Lp_.end() - 1);  // next free slot per column

  std::vector<double> x(n, 0.0);
  std::vector<int> pattern(n), stamp(n, -1);
  for (Index k = 0; k < n; ++k) {
    // Row pattern of L(k,:) via the elimination tree, in topological order.
    int top = static_cast<int>(n);
    stamp[k] = static_cast<int>(k);
    for (int p = Cp_[k]; p < Cp_[k + 1]; ++p) {
      int i = Ci_[p];
      if (i > static_cast<int>(k)) continue;
      x[i] = Cx[p];
      int len = 0;
      while (stamp[i] != static_cast<int>(k)) {
        pattern[len++] = i;
        stamp[i] = static_cast<int>(k);
        i = parent_[i];
      }
      while (len > 0) pattern[--top] = pattern[--len];
    }
    double d = x[k];
    x[k] = 0.0;
    for (; top < static_cast<int>(n); ++top) {
      int i = pattern[top];
      double lki = x[i] / Lx[Lp_[i]];
      x[i] = 0.0;
      for (int p = Lp_[i] + 1; p < c[i]; ++p) x[Li[p]] -= Lx[p] * lki;
      d -= lki * lki;
      int p = c[i]++;
      Li[p] = static_cast<int>(k);
      Lx[p] = lki;
    }
    if (!(d > 0.0))
      throw NumericError("cholesky: not positive definite at pivot " +
                         std::to_string(k) + " (original row " +
                         std::to_string(perm_[k]) + ")");
    int p = c[k]++;
    Li[p] = static_cast<int>(k);
    Lx[p] = std::sqrt(d);
  }

  std::vector<Triplet> trips;
  trips.reserve(lnz_);
  for (Index j = 0; j < n; ++j)
    for (int p = Lp_[j]; p < Lp_[j + 1]; ++p)
      trips.emplace_back(Li[p], static_cast<int>(j), Lx[p]);
  f.L_.setFromTriplets(trips.begin(), trips.end());
  f.L_.makeCompressed();
  return f;
}

Vec CholeskyFactor::forwardSolve(const Vec& b) const {
  const Index n = size();
  if (b.size() != n) throw std::invalid_argument("forwardSolve: size mismatch");
  Vec x(n);
  for (Index k = 0; k < n; ++k) x[k] = b[perm_[k]];
  L_.triangularView<Eigen::Lower>().solveInPlace(x);
  return x;
}

Vec CholeskyFactor::backSolve(const Vec& z) const {
  const Index n = size();
  if (z.size() != n) throw std::invalid_argument("backSolve: size mismatch");
  Vec x = z;
  L_.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
  Vec out(n);
  for (Index k = 0; k < n; ++k) out[perm_[k]] = x[k];
  return out;
}

Vec CholeskyFactor::solve(const Vec& b) const { return backSolve(forwardSolve(b)); }

Vec CholeskyFactor::diagonal() const {
  Vec d(size());
  for (Index j = 0; j < size(); ++j) d[j] = L_.coeff(j, j);
  return d;
}

double CholeskyFactor::logdet() const {
  double s = 0.0;
  for (Index j = 0; j < size(); ++j) s += std::log(L_.coeff(j, j));
  return 2.0 * s;
}

CholeskyFactor cholesky(const SparseSym& Q, Ordering ordering) {
  CholeskySolver solver;
  solver.analyze(Q, ordering);
  return solver.factorize(Q);
}

double logdet_diff(const CholeskyFactor& a, const CholeskyFactor& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("logdet_diff: dimension mismatch");
  const Index n = a.size();
  std::vector<double> da(n), db(n);
  Eigen::Map<Vec>(da.data(), n) = a.diagonal();
  Eigen::Map<Vec>(db.data(), n) = b.diagonal();
  std::sort(da.begin(), da.end());
  std::sort(db.begin(), db.end());
  std::vector<double> diff(n);
  for (Index i = 0; i < n; ++i) diff[i] = std::log(da[i]) - std::log(db[i]);
  std::sort(diff.begin(), diff.end(),
            [](double x, double y) { return std::abs(x) < std::abs(y); });
  double s = 0.0;
  for (double d : diff) s += d;
  return 2.0 * s;
}

}  // namespace nspde
