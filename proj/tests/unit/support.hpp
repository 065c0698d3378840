#pragma once

// Shared oracle helpers for the test suites. Everything here is deliberately
// independent of the library implementation paths it is used to check:
// quadrature instead of closed forms, dense algebra instead of sparse.

#include <cstdint>
#include <functional>
#include <random>
#include <utility>
#include <vector>

#include "nestedspde/types.hpp"

namespace testsup {

using nspde::Mat;
using nspde::SparseMat;
using nspde::Vec;

// Deterministic uniforms/normals for test fixtures.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}
  double uniform(double lo = 0.0, double hi = 1.0);
  double normal();
  int integer(int lo, int hi);  // inclusive

 private:
  std::mt19937_64 eng_;
};

// Random SPD matrix A Aᵀ + shift I with entries of A ~ N(0,1).
Mat random_spd(int n, Rng& rng, double shift = 0.5);

// Random sparse SPD matrix: banded + random off-diagonals, diagonally dominant.
SparseMat random_sparse_spd(int n, Rng& rng, int extra_per_row = 3);

// Five-point 2-D grid Laplacian on an nx-by-ny grid (Dirichlet, SPD).
SparseMat grid_laplacian(int nx, int ny);

double dense_logdet(const Mat& a);

double frob_rel_error(const Mat& a, const Mat& b);

// Gauss-Legendre nodes and weights on [-1, 1].
void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights);

// ∫_{S²} f(s) dS via Gauss-Legendre in z times uniform longitude; exact to
// machine precision for spherical polynomials of degree < min(2 nz - 1, nphi).
double sphere_quadrature(const std::function<double(double, double, double)>& f,
                         int nz = 64, int nphi = 128);

// Composite Simpson on [a, b].
double simpson(const std::function<double(double)>& f, double a, double b, int n = 4000);

// Modified Bessel K_nu(x) through the integral representation
// ∫₀^∞ exp(-x cosh t) cosh(nu t) dt; independent of any library Bessel path.
double bessel_k_integral(double nu, double x);

// Degree-5 exact quadrature over a triangle given its vertices (any embedding
// dimension); f receives barycentric coordinates.
double triangle_quadrature(
    const std::function<double(double, double, double)>& f_bary, double area);

}  // namespace testsup
