#pragma once

#include <vector>

#include "nestedspde/operator_spec.hpp"
#include "nestedspde/types.hpp"

namespace nspde {

// Matern covariance parameters: shape nu, scale kappa, variance parameter
// phi2 (NOT the variance itself), ambient dimension d.
struct MaternParams {
  double nu = 1.0;
  double kappa = 1.0;
  double phi2 = 1.0;
  int d = 2;

  void validate() const;
};

// C(h) = 2^{1-nu} phi2 / ((4 pi)^{d/2} Gamma(nu + d/2) kappa^{2 nu})
//        * (kappa |h|)^nu K_nu(kappa |h|), with the analytic limit at h = 0.
double matern_cov(const MaternParams& params, const Vec& h);

// d/dh_i of matern_cov: -h_i / (2 (nu + d/2 - 1)) * C^{nu-1}(h), the shape
// lowering identity (the factor reads 2 nu when d = 2). Requires nu > 1.
double matern_cov_derivative(const MaternParams& params, const Vec& h, int i);

// Spectral density of the field defined by a constant-parameter spec:
// S(k) = phi^2/(2 pi)^d * prod_j (b_j^2 + (B_j^T k)^2)
//                       / prod_j (kappa_j^2 + |k|^2)^{alpha_j}.
double spectral_density(const OperatorSystemSpec& spec, const Vec& k);

// prod_i (kappa_i^2 + x)^{-alpha_i} = sum_{i,j} p_{i,j} (kappa_i^2 + x)^{-j},
// j = 1..alpha_i per factor (zero coefficients are kept in the list).
struct PartialFraction {
  struct Term {
    double kappa;  // the scale itself, not squared
    int j;
    double p;
  };
  std::vector<Term> terms;

  double reconstruct(double x) const;
};

PartialFraction partial_fractions(const std::vector<L1Factor>& l1_factors);

// Covariance of the inner (latent) field: the partial-fraction mixture of
// Matern terms with shapes j - d/2, evaluated through the gamma-normalized
// kernel so non-positive shapes are handled exactly at h != 0.
double cov_x0(const std::vector<L1Factor>& l1_factors, double phi2,
              const Vec& h);

// Closed-form covariance of the full field: each outer factor
// (b - grad^T B B^T grad) is applied symbolically through the shape-lowering
// identity, yielding a finite sum q_t(h) * kernel(kappa_t, mu_t, |h|).
// At h = 0 a spectral quadrature fallback covers shape-exhausted cases;
// throws NumericError when the field is not continuous (infinite variance).
double nested_cov(const OperatorSystemSpec& spec, const Vec& h);

// Independent spectral oracle (planar only): inverse FFT of the spectral
// density on a grid_size^2 grid covering [-extent/2, extent/2)^2 lags.
// Entry (i, j) is the covariance at lag ((i - N/2) dx, (j - N/2) dx) with
// dx = extent / N; the zero lag sits at (N/2, N/2). The output is exactly
// symmetrized. Requires extent > 8 / min kappa to limit aliasing.
Mat cov_fft_oracle(const OperatorSystemSpec& spec, int grid_size,
                   double extent);

}  // namespace nspde
