#pragma once

#include <functional>
#include <string>
#include <vector>

#include "nestedspde/discretize.hpp"
#include "nestedspde/observations.hpp"
#include "nestedspde/trend.hpp"

namespace nspde {

// ---------------------------------------------------------------------------
// Packed parameter vector
//
// Every fitted scalar lives in one vector, in a fixed order:
//   [0]                  log sigma^2
//   per L1 factor        log kappa^2 (constant) or the LogLinear coefficients
//   per L2 factor        log b (constant) or the LogLinear coefficients
//   per L2 factor        B components (constant) or VectorLinear coefficients
// phi is never fitted; positivity of sigma^2, kappa^2 and b is enforced by
// the log transform, harmonic coefficients are unconstrained.

Index psi_dim(const OperatorSystemSpec& spec);
std::vector<std::string> psi_names(const OperatorSystemSpec& spec);

// Reads the current parameter values out of the spec.
Vec pack_psi(const OperatorSystemSpec& spec, double sigma2);

// Writes packed values into a spec of the same structure.
void unpack_psi(const Vec& psi, OperatorSystemSpec& spec, double& sigma2);

// ---------------------------------------------------------------------------
// Fitting stages
//
// Stage k truncates every harmonic expansion to order min(k, its order); a
// VectorLinear advection field has no order-0 term and is pinned to the zero
// vector at stage 0. Constant fields pass through unchanged.

int max_basis_order(const OperatorSystemSpec& spec);
OperatorSystemSpec truncate_spec(const OperatorSystemSpec& spec, int order);

// Copies estimates from a lower-order stage into the layout of a higher one;
// coefficients without a counterpart start at zero.
Vec transfer_psi(const OperatorSystemSpec& from_spec, const Vec& from_psi,
                 const OperatorSystemSpec& to_spec);

// ---------------------------------------------------------------------------
// Posterior in canonical form
//
// Observation model Y = M mu + Lambda w0 + noise, noise variance sigma^2,
// Lambda = Phi H, prior w0 ~ N(0, Q_w^{-1}), mu ~ N(m_mu, Q_mu^{-1}).

struct PosteriorCanonical {
  Vec b;           // canonical vector of w0 at mu = mu_hat
  SparseMat Q_hat;
  Vec b_mu;
  Mat Q_hat_mu;
  Vec mu_hat;      // Q_hat_mu^{-1} b_mu
};

PosteriorCanonical posterior_canonical(const DiscretizedModel& model,
                                       const TrendModel& trend,
                                       const ObservationSet& obs,
                                       double sigma2);

// Fully normalized log marginal density of Y with the latent field and the
// trend integrated out. Factorization failures and non-finite intermediates
// return -inf instead of throwing, so an optimizer can reject the step.
double log_marginal_posterior(const DiscretizedModel& model,
                              const TrendModel& trend,
                              const ObservationSet& obs, double sigma2);

// The same quantity as a reusable function of the packed parameters, with the
// FEM matrices assembled once. Structure (factor kinds, basis sizes) is taken
// from spec_template; its parameter values are ignored.
std::function<double(const Vec&)> marginal_objective(
    const TriangularMesh& mesh, const OperatorSystemSpec& spec_template,
    const TrendModel& trend, const ObservationSet& obs);

// ---------------------------------------------------------------------------
// Maximum-posterior fitting

struct FitOptions {
  int max_iterations = 2000;
  double gradient_tol = 1e-5;           // converged when grad inf-norm < tol
  double relaxed_gradient_tol = 1e-4;   // accepted when the objective stalls
  double relative_objective_tol = 1e-9;
  double fd_step = 1e-4;                // central-difference gradient step
  Vec initial_psi;                      // optional: skip staging, start here
  Vec prior_mean;                       // optional Gaussian prior on psi
  Vec prior_precision;                  // diagonal; empty = flat prior
};

struct FittedModel {
  OperatorSystemSpec spec;   // template structure with fitted values baked in
  TrendModel trend;
  ObservationSet obs;
  const TriangularMesh* mesh = nullptr;
  double sigma2 = 1.0;
  Vec psi;
  Vec mu_hat;
  double log_marginal = 0.0;  // flat-prior value at the optimum
  bool converged = false;
  int iterations = 0;
  std::string message;
  std::vector<double> stage_objectives;  // final objective per stage
};

// Staged BFGS maximization of the log marginal posterior with
// central-difference gradients. Stage 0 fits the constant restriction; each
// following stage adds one harmonic order, initialized from the previous
// estimates. Templates with allow_zero_b factors are rejected: fitting keeps
// b positive.
FittedModel fit(const TriangularMesh& mesh,
                const OperatorSystemSpec& spec_template,
                const TrendModel& trend, const ObservationSet& obs,
                const FitOptions& options = {});

// ---------------------------------------------------------------------------
// Prediction

struct KrigingResult {
  Vec mean;
  Vec sd;  // includes trend uncertainty from the joint (w0, mu) posterior
};

KrigingResult kriging(const DiscretizedModel& model, const TrendModel& trend,
                      const ObservationSet& obs, double sigma2,
                      const Mat& query_points);
KrigingResult kriging(const FittedModel& fitted, const Mat& query_points);

// ---------------------------------------------------------------------------
// Model assessment

struct InformationCriteria {
  double aic = 0.0;
  double bic = 0.0;
  int parameter_count = 0;  // dim psi + dim mu
};

InformationCriteria information_criteria(const FittedModel& fitted);

// Central-difference derivatives with per-coordinate step h_i = step (1+|x_i|).
Vec central_difference_gradient(const std::function<double(const Vec&)>& f,
                                const Vec& x, double step);
Mat central_difference_hessian(const std::function<double(const Vec&)>& f,
                               const Vec& x, double step);

// Covariance estimate (-H)^{-1} from a log-density Hessian. Throws
// NumericError listing the eigenvalues when H is not negative definite.
Mat covariance_from_hessian(const Mat& hessian);

// Parameter covariance from the finite-difference Hessian of the flat-prior
// objective at the fitted optimum.
Mat hessian_uncertainty(const FittedModel& fitted, double step = 1e-3);

// ---------------------------------------------------------------------------
// Residual diagnostics

struct ResidualDiagnostics {
  Vec residuals;     // Y - kriging mean at the observation locations
  Vec bin_center;    // bin 0 sits at distance zero, the rest are midpoints
  Vec bin_covariance;  // mean of residual products per distance bin
  Eigen::VectorXi bin_count;
  Vec node_mean;     // residual mean per mesh node, pooled over the 1-ring
  Vec node_sd;       // population sd of the same pool
  Eigen::VectorXi node_count;  // pooled observation count per node
};

// Distances are great-circle on the sphere and Euclidean on the plane.
// Bin 0 holds only the zero-distance pairs (each observation with itself,
// plus exact duplicates), so its value estimates the residual variance;
// positive distances split into bins-1 equal widths up to d_max.
// Nodes whose pooled set is empty report zero mean/sd and count 0.
ResidualDiagnostics residual_diagnostics(const FittedModel& fitted,
                                         const ObservationSet& obs,
                                         int bins = 30);

}  // namespace nspde
