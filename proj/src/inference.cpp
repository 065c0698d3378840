#include "nestedspde/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>

#include "nestedspde/analytic.hpp"
#include "nestedspde/fem.hpp"
#include "nestedspde/sparse.hpp"

namespace nspde {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kInf = std::numeric_limits<double>::infinity();

// Fields in packed order: kappa^2 per L1 factor, then b per L2 factor, then
// B per L2 factor. Slot 0 (log sigma^2) is handled by the callers.
std::vector<const ParamField*> layout_fields(const OperatorSystemSpec& spec) {
  std::vector<const ParamField*> fields;
  for (const auto& f : spec.l1_factors) fields.push_back(&f.kappa2);
  for (const auto& f : spec.l2_factors) fields.push_back(&f.b);
  for (const auto& f : spec.l2_factors) fields.push_back(&f.B);
  return fields;
}

std::vector<ParamField*> layout_fields(OperatorSystemSpec& spec) {
  std::vector<ParamField*> fields;
  for (auto& f : spec.l1_factors) fields.push_back(&f.kappa2);
  for (auto& f : spec.l2_factors) fields.push_back(&f.b);
  for (auto& f : spec.l2_factors) fields.push_back(&f.B);
  return fields;
}

Index field_slots(const ParamField& f) {
  switch (f.kind()) {
    case ParamField::Kind::Constant:
      if (!f.isVector()) return 1;
      return f.isFixed() ? 0 : f.constantVectorValue().size();
    case ParamField::Kind::LogLinear:
      return f.scalarBasis().size();
    case ParamField::Kind::VectorLinear:
      return f.vectorBasis().size();
  }
  return 0;
}

// Destination slot in `to` for every slot of `from`, where `from` is a
// truncation stage of the same template as `to`. Valid because harmonic
// bases order their columns by ascending order k, so a lower-order basis is
// a prefix of a higher-order one.
std::vector<Index> layout_map(const OperatorSystemSpec& from,
                              const OperatorSystemSpec& to) {
  auto ff = layout_fields(from);
  auto tf = layout_fields(to);
  if (ff.size() != tf.size())
    throw ConfigError("parameter layouts come from different templates");
  std::vector<Index> map;
  map.push_back(0);
  Index tat = 1;
  for (std::size_t i = 0; i < ff.size(); ++i) {
    Index fm = field_slots(*ff[i]);
    Index tm = field_slots(*tf[i]);
    if (fm > tm)
      throw ConfigError("cannot map a larger parameter stage into a smaller one");
    for (Index j = 0; j < fm; ++j) map.push_back(tat + j);
    tat += tm;
  }
  return map;
}

// ---------------------------------------------------------------------------
// Canonical posterior pieces shared by the marginal, kriging and the
// canonical-form accessor.

struct ObsDesign {
  SparseMat Phi;  // N x n basis weights at the observation locations
  Mat M;          // N x q trend design
};

ObsDesign make_design(const TriangularMesh& mesh, const TrendModel& trend,
                      const ObservationSet& obs) {
  obs.validate(mesh);
  ObsDesign dsn;
  if (obs.count() > 0) {
    dsn.Phi = evaluate_basis(mesh, obs.locations).Phi;
    dsn.M = trend.design(obs.locations);
  } else {
    dsn.Phi.resize(0, mesh.numVertices());
    dsn.M.resize(0, trend.dim());
  }
  return dsn;
}

struct Canonical {
  Index n = 0, N = 0, q = 0;
  double sigma2 = 1.0, is2 = 1.0;
  SparseMat Lambda;  // Phi H
  CholeskyFactor fac_w, fac_hat;
  SparseMat Q_hat;
  Vec LtY, QiLtY;  // Lambda^T Y and Q_hat^{-1} Lambda^T Y
  Mat LtM, W;      // Lambda^T M and Q_hat^{-1} Lambda^T M
  Mat Q_mu, Q_hat_mu;
  Vec m_mu, b_mu, mu_hat;
  Eigen::LLT<Mat> llt_prior, llt_mu;
};

Canonical assemble_canonical(const DiscretizedModel& model,
                             const ObsDesign& dsn, const ObservationSet& obs,
                             const TrendModel& trend, double sigma2) {
  if (model.mesh == nullptr)
    throw ConfigError("discretized model holds no mesh");
  if (!(sigma2 > 0.0) || !std::isfinite(sigma2))
    throw ConfigError("noise variance must be positive and finite");
  Canonical c;
  c.n = model.Q_x0.rows();
  c.N = obs.count();
  c.q = trend.dim();
  c.sigma2 = sigma2;
  c.is2 = 1.0 / sigma2;
  c.fac_w = cholesky(SparseSym(model.Q_x0));
  c.Lambda = dsn.Phi * model.H;
  SparseMat LtL = SparseMat(c.Lambda.transpose()) * c.Lambda;
  c.Q_hat = model.Q_x0 + c.is2 * LtL;
  c.fac_hat = cholesky(SparseSym(c.Q_hat));
  c.LtY = SparseMat(c.Lambda.transpose()) * obs.values;
  c.QiLtY = c.fac_hat.solve(c.LtY);
  c.m_mu = trend.priorMean();
  c.Q_mu = trend.priorPrecision();
  if (c.q > 0) {
    c.LtM = SparseMat(c.Lambda.transpose()) * dsn.M;
    c.W.resize(c.n, c.q);
    for (Index j = 0; j < c.q; ++j)
      c.W.col(j) = c.fac_hat.solve(Vec(c.LtM.col(j)));
    Mat qhm = c.Q_mu + c.is2 * (dsn.M.transpose() * dsn.M) -
              (c.is2 * c.is2) * (c.LtM.transpose() * c.W);
    c.Q_hat_mu = 0.5 * (qhm + Mat(qhm.transpose()));
    c.b_mu = c.Q_mu * c.m_mu + c.is2 * (dsn.M.transpose() * obs.values) -
             (c.is2 * c.is2) * (c.LtM.transpose() * c.QiLtY);
    c.llt_prior.compute(c.Q_mu);
    if (c.llt_prior.info() != Eigen::Success)
      throw NumericError("trend prior precision is not positive definite");
    c.llt_mu.compute(c.Q_hat_mu);
    if (c.llt_mu.info() != Eigen::Success)
      throw NumericError("trend posterior precision is not positive definite");
    c.mu_hat = c.llt_mu.solve(c.b_mu);
  } else {
    c.Q_hat_mu.resize(0, 0);
    c.b_mu.resize(0);
    c.mu_hat.resize(0);
  }
  return c;
}

double dense_llt_logdet(const Eigen::LLT<Mat>& llt) {
  const Mat& packed = llt.matrixLLT();
  double s = 0.0;
  for (Index i = 0; i < packed.rows(); ++i) s += std::log(packed(i, i));
  return 2.0 * s;
}

// Fully normalized log marginal: integrating w0 and mu out of the Gaussian
// observation model gives
//   -N/2 log(2 pi sigma^2) + 1/2 log|Q_w|/|Q_hat| + 1/2 log|Q_mu|/|Q_hat_mu|
//   - 1/(2 sigma^2) Y'Y + 1/(2 sigma^4) Y'Lambda Q_hat^{-1} Lambda'Y
//   + 1/2 b_mu' Q_hat_mu^{-1} b_mu - 1/2 m_mu' Q_mu m_mu.
double marginal_from(const Canonical& c, const Vec& y) {
  if (c.N == 0) return 0.0;
  double lm = -0.5 * double(c.N) * (kLog2Pi + std::log(c.sigma2));
  lm -= 0.5 * logdet_diff(c.fac_hat, c.fac_w);
  double quad = c.fac_hat.forwardSolve(c.LtY).squaredNorm();
  lm += 0.5 * c.is2 * c.is2 * quad - 0.5 * c.is2 * y.squaredNorm();
  if (c.q > 0) {
    lm += 0.5 * (dense_llt_logdet(c.llt_prior) - dense_llt_logdet(c.llt_mu));
    lm += 0.5 * c.b_mu.dot(c.mu_hat);
    lm -= 0.5 * c.m_mu.dot(c.Q_mu * c.m_mu);
  }
  return lm;
}

// Objective core: unpack psi into the structure, discretize, evaluate.
// Numerical failures and value-driven rejections (a parameter field pushed
// to zero by exp underflow) count as -inf; a wrong psi length is a caller
// bug and throws.
double eval_lm(const TriangularMesh& mesh, const FemMatrices& fem,
               const OperatorSystemSpec& structure, const ObsDesign& dsn,
               const TrendModel& trend, const ObservationSet& obs,
               const Vec& psi) {
  if (psi.size() != psi_dim(structure))
    throw ConfigError("packed parameter vector has length " +
                      std::to_string(psi.size()) + ", the template expects " +
                      std::to_string(psi_dim(structure)));
  try {
    OperatorSystemSpec spec = structure;
    double sigma2 = 1.0;
    unpack_psi(psi, spec, sigma2);
    DiscretizedModel model = discretize(mesh, fem, spec);
    Canonical c = assemble_canonical(model, dsn, obs, trend, sigma2);
    double lm = marginal_from(c, obs.values);
    return std::isfinite(lm) ? lm : -kInf;
  } catch (const NumericError&) {
    return -kInf;
  } catch (const ConfigError&) {
    return -kInf;
  }
}

// ---------------------------------------------------------------------------
// BFGS maximization with backtracking line search.

struct OptResult {
  Vec x;
  double f = -kInf;
  int iterations = 0;
  bool converged = false;
  std::string message;
};

OptResult maximize_bfgs(const std::function<double(const Vec&)>& f,
                        const Vec& start, const FitOptions& opt) {
  auto g = [&](const Vec& v) { return -f(v); };
  const Index p = start.size();
  OptResult res;
  Vec x = start;
  double fx = g(x);
  if (!std::isfinite(fx))
    throw NumericError("objective is not finite at the initial parameters");
  Vec grad = central_difference_gradient(g, x, opt.fd_step);
  if (!grad.allFinite()) {
    res.x = x;
    res.f = -fx;
    res.message = "gradient is not finite at the initial parameters";
    return res;
  }
  Mat Hinv = Mat::Identity(p, p);
  double gnorm = grad.lpNorm<Eigen::Infinity>();
  bool converged = false;
  std::string message = "maximum iterations reached";
  int iter = 0;
  for (; iter < opt.max_iterations; ++iter) {
    if (gnorm < opt.gradient_tol) {
      converged = true;
      message = "gradient below tolerance";
      break;
    }
    Vec d = -(Hinv * grad);
    double slope = grad.dot(d);
    if (!(slope < 0.0) || !d.allFinite()) {
      Hinv.setIdentity();
      d = -grad;
      slope = grad.dot(d);
    }
    double t = 1.0;
    double fn = kInf;
    Vec xn;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      xn = x + t * d;
      fn = g(xn);
      if (std::isfinite(fn) && fn <= fx + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      message = "line search found no ascent";
      break;
    }
    Vec gn = central_difference_gradient(g, xn, opt.fd_step);
    Vec s = xn - x;
    Vec yv = gn - grad;
    double rel = std::abs(fn - fx) / std::max(1.0, std::abs(fx));
    x = xn;
    fx = fn;
    grad = gn;
    gnorm = grad.lpNorm<Eigen::Infinity>();
    if (!std::isfinite(gnorm)) {
      message = "gradient became non-finite";
      ++iter;
      break;
    }
    if (rel < opt.relative_objective_tol && gnorm < opt.relaxed_gradient_tol) {
      converged = true;
      message = gnorm < opt.gradient_tol
                    ? "gradient and objective change below tolerance"
                    : "objective stalled with a small gradient";
      ++iter;
      break;
    }
    double sy = s.dot(yv);
    if (std::isfinite(sy) && sy > 1e-12 * s.norm() * yv.norm()) {
      Vec Hy = Hinv * yv;
      double yHy = yv.dot(Hy);
      double rho = 1.0 / sy;
      Hinv += (sy + yHy) * rho * rho * (s * s.transpose());
      Mat HySt = Hy * s.transpose();
      Hinv -= rho * (HySt + HySt.transpose());
    }
  }
  res.x = x;
  res.f = -fx;
  res.iterations = iter;
  res.converged = converged;
  res.message = message;
  return res;
}

// ---------------------------------------------------------------------------
// Stage-0 starting point: moment-matched noise, range a quarter of the
// domain diameter, and b chosen so the implied field variance matches the
// data variance.

Vec initial_guess(const TriangularMesh& mesh, const OperatorSystemSpec& staged,
                  const ObservationSet& obs) {
  Vec x = Vec::Zero(psi_dim(staged));
  double vy = 1.0;
  if (obs.count() > 1) {
    double mean = obs.values.mean();
    vy = (obs.values.array() - mean).square().sum() / double(obs.count() - 1);
  }
  if (!(vy > 1e-12) || !std::isfinite(vy)) vy = 1.0;

  double rho;
  if (mesh.manifold == Manifold::Sphere) {
    rho = kPi / 4.0;
  } else {
    Vec lo = mesh.vertices.colwise().minCoeff();
    Vec hi = mesh.vertices.colwise().maxCoeff();
    rho = 0.25 * (hi - lo).norm();
    if (!(rho > 0.0)) rho = 1.0;
  }
  double nu = std::max(0.5, double(staged.alphaSum()) - staged.n2() - 1.0);
  double kappa0sq = 8.0 * nu / (rho * rho);

  double c0;
  std::vector<L1Factor> consts;
  for (const auto& f : staged.l1_factors)
    consts.push_back({ParamField::constant(kappa0sq), f.alpha});
  try {
    c0 = cov_x0(consts, staged.phi * staged.phi, Vec::Zero(2));
  } catch (const NumericError&) {
    c0 = staged.phi * staged.phi;
  }
  if (!(c0 > 0.0) || !std::isfinite(c0)) c0 = 1.0;
  double b0 = 1.0;
  if (staged.n2() > 0) {
    b0 = std::pow(std::max(0.9 * vy, 1e-12) / c0, 0.5 / staged.n2());
    b0 = std::min(1e6, std::max(1e-6, b0));
  }

  Index at = 0;
  x[at++] = std::log(std::max(0.1 * vy, 1e-12));
  const double y00 = 1.0 / std::sqrt(4.0 * kPi);
  auto scalar_slots = [&](const ParamField& f, double value) {
    if (f.kind() == ParamField::Kind::Constant) {
      x[at++] = std::log(value);
    } else {
      // LogLinear: the order-0 harmonic is constant y00, so the constant
      // equivalent sits in the first coefficient.
      x[at] = std::log(value) / y00;
      at += f.scalarBasis().size();
    }
  };
  for (const auto& f : staged.l1_factors) scalar_slots(f.kappa2, kappa0sq);
  for (const auto& f : staged.l2_factors) scalar_slots(f.b, b0);
  // B slots (if any) start at zero.
  return x;
}

}  // namespace

// ---------------------------------------------------------------------------
// Packed parameters

Index psi_dim(const OperatorSystemSpec& spec) {
  Index total = 1;
  for (const ParamField* f : layout_fields(spec)) total += field_slots(*f);
  return total;
}

std::vector<std::string> psi_names(const OperatorSystemSpec& spec) {
  std::vector<std::string> names;
  names.push_back("log_sigma2");
  auto component = [](Index j, Index total) -> std::string {
    if (total <= 3) return std::string(1, "xyz"[j]);
    return "c" + std::to_string(j);
  };
  auto scalar_names = [&](const ParamField& f, const std::string& base) {
    if (f.kind() == ParamField::Kind::Constant) {
      names.push_back("log_" + base);
    } else {
      for (int j = 0; j < f.scalarBasis().size(); ++j)
        names.push_back(base + "_c" + std::to_string(j));
    }
  };
  for (int i = 0; i < spec.n1(); ++i)
    scalar_names(spec.l1_factors[i].kappa2, "kappa2_" + std::to_string(i + 1));
  for (int i = 0; i < spec.n2(); ++i)
    scalar_names(spec.l2_factors[i].b, "b_" + std::to_string(i + 1));
  for (int i = 0; i < spec.n2(); ++i) {
    const ParamField& B = spec.l2_factors[i].B;
    Index m = field_slots(B);
    for (Index j = 0; j < m; ++j) {
      if (B.kind() == ParamField::Kind::Constant)
        names.push_back("B_" + std::to_string(i + 1) + "_" + component(j, m));
      else
        names.push_back("B_" + std::to_string(i + 1) + "_c" + std::to_string(j));
    }
  }
  return names;
}

Vec pack_psi(const OperatorSystemSpec& spec, double sigma2) {
  if (!(sigma2 > 0.0))
    throw ConfigError("noise variance must be positive to pack on log scale");
  Vec psi(psi_dim(spec));
  Index at = 0;
  psi[at++] = std::log(sigma2);
  for (const ParamField* f : layout_fields(spec)) {
    Index m = field_slots(*f);
    if (m == 0) continue;
    if (f->kind() == ParamField::Kind::Constant) {
      if (f->isVector()) {
        psi.segment(at, m) = f->constantVectorValue();
      } else {
        double v = f->constantValue();
        if (!(v > 0.0))
          throw ConfigError(
              "cannot pack a non-positive constant on the log scale");
        psi[at] = std::log(v);
      }
    } else {
      psi.segment(at, m) = f->coefficients();
    }
    at += m;
  }
  return psi;
}

void unpack_psi(const Vec& psi, OperatorSystemSpec& spec, double& sigma2) {
  if (psi.size() != psi_dim(spec))
    throw ConfigError("packed parameter vector has length " +
                      std::to_string(psi.size()) + ", the spec expects " +
                      std::to_string(psi_dim(spec)));
  Index at = 0;
  sigma2 = std::exp(psi[at++]);
  for (ParamField* f : layout_fields(spec)) {
    Index m = field_slots(*f);
    if (m == 0) continue;
    if (f->kind() == ParamField::Kind::Constant) {
      if (f->isVector())
        *f = ParamField::constantVector(psi.segment(at, m));
      else
        *f = ParamField::constant(std::exp(psi[at]));
    } else {
      f->setCoefficients(psi.segment(at, m));
    }
    at += m;
  }
}

// ---------------------------------------------------------------------------
// Stages

int max_basis_order(const OperatorSystemSpec& spec) {
  int order = 0;
  for (const ParamField* f : layout_fields(spec)) {
    if (f->kind() == ParamField::Kind::LogLinear)
      order = std::max(order, f->scalarBasis().max_order);
    else if (f->kind() == ParamField::Kind::VectorLinear)
      order = std::max(order, f->vectorBasis().max_order);
  }
  return order;
}

OperatorSystemSpec truncate_spec(const OperatorSystemSpec& spec, int order) {
  if (order < 0) throw ConfigError("stage order must be nonnegative");
  OperatorSystemSpec out = spec;
  auto cut_scalar = [&](ParamField& f) {
    if (f.kind() != ParamField::Kind::LogLinear) return;
    const ScalarHarmonicBasis& basis = f.scalarBasis();
    int mo = std::min(order, basis.max_order);
    if (mo == basis.max_order) return;
    ScalarHarmonicBasis nb =
        ScalarHarmonicBasis::make(mo, basis.axially_symmetric);
    f = ParamField::logLinear(nb, f.coefficients().head(nb.size()));
  };
  for (auto& fac : out.l1_factors) cut_scalar(fac.kappa2);
  for (auto& fac : out.l2_factors) {
    cut_scalar(fac.b);
    if (fac.B.kind() == ParamField::Kind::VectorLinear) {
      const VectorHarmonicBasis& basis = fac.B.vectorBasis();
      if (order == 0) {
        // No order-0 vector harmonic exists; the stage-0 restriction pins
        // the advection to zero with no fitted slots.
        fac.B = ParamField::fixedVector(Vec::Zero(3));
      } else if (int mo = std::min(order, basis.max_order);
                 mo != basis.max_order) {
        VectorHarmonicBasis nb =
            VectorHarmonicBasis::make(mo, basis.axially_symmetric);
        fac.B = ParamField::vectorLinear(nb, fac.B.coefficients().head(nb.size()));
      }
    }
  }
  return out;
}

Vec transfer_psi(const OperatorSystemSpec& from_spec, const Vec& from_psi,
                 const OperatorSystemSpec& to_spec) {
  if (from_psi.size() != psi_dim(from_spec))
    throw ConfigError("packed parameter vector does not match its spec");
  std::vector<Index> map = layout_map(from_spec, to_spec);
  Vec out = Vec::Zero(psi_dim(to_spec));
  for (std::size_t i = 0; i < map.size(); ++i)
    out[map[i]] = from_psi[Index(i)];
  return out;
}

// ---------------------------------------------------------------------------
// Posterior evaluation

PosteriorCanonical posterior_canonical(const DiscretizedModel& model,
                                       const TrendModel& trend,
                                       const ObservationSet& obs,
                                       double sigma2) {
  if (model.mesh == nullptr)
    throw ConfigError("discretized model holds no mesh");
  ObsDesign dsn = make_design(*model.mesh, trend, obs);
  Canonical c = assemble_canonical(model, dsn, obs, trend, sigma2);
  PosteriorCanonical out;
  out.Q_hat = c.Q_hat;
  out.b_mu = c.b_mu;
  out.Q_hat_mu = c.Q_hat_mu;
  out.mu_hat = c.mu_hat;
  Vec proj = c.LtY;
  if (c.q > 0) proj.noalias() -= c.LtM * c.mu_hat;
  out.b = c.is2 * proj;
  return out;
}

double log_marginal_posterior(const DiscretizedModel& model,
                              const TrendModel& trend,
                              const ObservationSet& obs, double sigma2) {
  if (model.mesh == nullptr)
    throw ConfigError("discretized model holds no mesh");
  ObsDesign dsn = make_design(*model.mesh, trend, obs);
  try {
    Canonical c = assemble_canonical(model, dsn, obs, trend, sigma2);
    double lm = marginal_from(c, obs.values);
    return std::isfinite(lm) ? lm : -kInf;
  } catch (const NumericError&) {
    return -kInf;
  }
}

std::function<double(const Vec&)> marginal_objective(
    const TriangularMesh& mesh, const OperatorSystemSpec& spec_template,
    const TrendModel& trend, const ObservationSet& obs) {
  spec_template.validate(mesh.dim());
  auto fem = std::make_shared<const FemMatrices>(assemble(mesh));
  auto dsn = std::make_shared<const ObsDesign>(make_design(mesh, trend, obs));
  auto structure = std::make_shared<const OperatorSystemSpec>(spec_template);
  const TriangularMesh* meshp = &mesh;
  return [meshp, fem, dsn, structure, trend, obs](const Vec& psi) {
    return eval_lm(*meshp, *fem, *structure, *dsn, trend, obs, psi);
  };
}

// ---------------------------------------------------------------------------
// Fitting

FittedModel fit(const TriangularMesh& mesh,
                const OperatorSystemSpec& spec_template,
                const TrendModel& trend, const ObservationSet& obs,
                const FitOptions& options) {
  spec_template.validate(mesh.dim());
  obs.validate(mesh);
  if (trend.kind == TrendModel::Kind::Harmonic &&
      mesh.manifold != Manifold::Sphere)
    throw ConfigError("harmonic trend requires a sphere mesh");
  for (int i = 0; i < spec_template.n2(); ++i)
    if (spec_template.l2_factors[i].allow_zero_b)
      throw ConfigError("L2 factor " + std::to_string(i + 1) +
                        " allows b = 0; such factors are simulation-only, "
                        "fitting keeps b positive");

  auto fem = std::make_shared<const FemMatrices>(assemble(mesh));
  auto dsn = std::make_shared<const ObsDesign>(make_design(mesh, trend, obs));

  const int maxord = max_basis_order(spec_template);
  const OperatorSystemSpec final_spec = truncate_spec(spec_template, maxord);
  const Index final_dim = psi_dim(final_spec);

  const bool has_prior = options.prior_precision.size() != 0;
  if (has_prior || options.prior_mean.size() != 0) {
    if (options.prior_precision.size() != final_dim ||
        options.prior_mean.size() != final_dim)
      throw ConfigError("psi prior vectors must have length " +
                        std::to_string(final_dim));
    if ((options.prior_precision.array() < 0.0).any())
      throw ConfigError("psi prior precision must be nonnegative");
  }

  int first_stage = 0;
  if (options.initial_psi.size() != 0) {
    if (options.initial_psi.size() != final_dim)
      throw ConfigError("initial_psi must have length " +
                        std::to_string(final_dim));
    first_stage = maxord;
  }

  FittedModel out;
  out.mesh = &mesh;
  out.trend = trend;
  out.obs = obs;

  Vec psi;
  OperatorSystemSpec prev_spec;
  bool have_prev = false;
  OptResult last;
  int total_iterations = 0;

  for (int stage = first_stage; stage <= maxord; ++stage) {
    OperatorSystemSpec staged = truncate_spec(spec_template, stage);
    Vec x0;
    if (options.initial_psi.size() != 0 && stage == first_stage)
      x0 = options.initial_psi;
    else if (!have_prev)
      x0 = initial_guess(mesh, staged, obs);
    else
      x0 = transfer_psi(prev_spec, psi, staged);

    std::vector<Index> pmap;
    if (has_prior) pmap = layout_map(staged, final_spec);
    auto objective = [&, staged, pmap](const Vec& v) -> double {
      double lm = eval_lm(mesh, *fem, staged, *dsn, trend, obs, v);
      if (has_prior && std::isfinite(lm)) {
        for (std::size_t i = 0; i < pmap.size(); ++i) {
          double dev = v[Index(i)] - options.prior_mean[pmap[i]];
          lm -= 0.5 * options.prior_precision[pmap[i]] * dev * dev;
        }
      }
      return lm;
    };
    last = maximize_bfgs(objective, x0, options);
    psi = last.x;
    prev_spec = staged;
    have_prev = true;
    total_iterations += last.iterations;
    out.stage_objectives.push_back(last.f);
  }

  OperatorSystemSpec fitted_spec = final_spec;
  double sigma2 = 1.0;
  unpack_psi(psi, fitted_spec, sigma2);
  out.spec = fitted_spec;
  out.sigma2 = sigma2;
  out.psi = psi;
  out.converged = last.converged;
  out.message = last.message;
  out.iterations = total_iterations;
  out.log_marginal = eval_lm(mesh, *fem, final_spec, *dsn, trend, obs, psi);
  DiscretizedModel model = discretize(mesh, *fem, fitted_spec);
  Canonical c = assemble_canonical(model, *dsn, obs, trend, sigma2);
  out.mu_hat = c.mu_hat;
  return out;
}

// ---------------------------------------------------------------------------
// Kriging

KrigingResult kriging(const DiscretizedModel& model, const TrendModel& trend,
                      const ObservationSet& obs, double sigma2,
                      const Mat& query_points) {
  if (model.mesh == nullptr)
    throw ConfigError("discretized model holds no mesh");
  const TriangularMesh& mesh = *model.mesh;
  ObsDesign dsn = make_design(mesh, trend, obs);
  Canonical c = assemble_canonical(model, dsn, obs, trend, sigma2);

  KrigingResult out;
  Index nq = query_points.rows();
  out.mean.resize(nq);
  out.sd.resize(nq);
  if (nq == 0) return out;

  BasisEvaluation qb = evaluate_basis(mesh, query_points);
  SparseMat AqT = SparseMat((qb.Phi * model.H).transpose());
  Mat Mq = trend.design(query_points);

  Vec proj = c.LtY;
  if (c.q > 0) proj.noalias() -= c.LtM * c.mu_hat;
  Vec wmean = c.fac_hat.solve(Vec(c.is2 * proj));

  Vec a = Vec::Zero(c.n);
  for (Index j = 0; j < nq; ++j) {
    a.setZero();
    for (SparseMat::InnerIterator it(AqT, j); it; ++it)
      a[it.row()] = it.value();
    double mean = a.dot(wmean);
    double var = c.fac_hat.forwardSolve(a).squaredNorm();
    if (c.q > 0) {
      mean += Mq.row(j).dot(c.mu_hat);
      Vec gq = c.is2 * (c.W.transpose() * a) - Mq.row(j).transpose();
      var += gq.dot(c.llt_mu.solve(gq));
    }
    out.mean[j] = mean;
    out.sd[j] = std::sqrt(std::max(0.0, var));
  }
  return out;
}

KrigingResult kriging(const FittedModel& fitted, const Mat& query_points) {
  if (fitted.mesh == nullptr)
    throw ConfigError("fitted model holds no mesh");
  DiscretizedModel model = discretize(*fitted.mesh, fitted.spec);
  return kriging(model, fitted.trend, fitted.obs, fitted.sigma2, query_points);
}

// ---------------------------------------------------------------------------
// Model assessment

InformationCriteria information_criteria(const FittedModel& fitted) {
  InformationCriteria ic;
  ic.parameter_count =
      int(psi_dim(fitted.spec) + fitted.trend.dim());
  double ll = fitted.log_marginal;
  double n = std::max<double>(1.0, double(fitted.obs.count()));
  ic.aic = 2.0 * ic.parameter_count - 2.0 * ll;
  ic.bic = ic.parameter_count * std::log(n) - 2.0 * ll;
  return ic;
}

Vec central_difference_gradient(const std::function<double(const Vec&)>& f,
                                const Vec& x, double step) {
  if (!(step > 0.0)) throw ConfigError("finite-difference step must be positive");
  Vec g(x.size());
  Vec xp = x;
  for (Index i = 0; i < x.size(); ++i) {
    double h = step * (1.0 + std::abs(x[i]));
    double fp = 0.0, fm = 0.0;
    for (int attempt = 0; attempt < 4; ++attempt) {
      xp[i] = x[i] + h;
      fp = f(xp);
      xp[i] = x[i] - h;
      fm = f(xp);
      if (std::isfinite(fp) && std::isfinite(fm)) break;
      h *= 0.25;  // shrink toward the feasible region near -inf cliffs
    }
    xp[i] = x[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

Mat central_difference_hessian(const std::function<double(const Vec&)>& f,
                               const Vec& x, double step) {
  if (!(step > 0.0)) throw ConfigError("finite-difference step must be positive");
  const Index p = x.size();
  Vec h(p);
  for (Index i = 0; i < p; ++i) h[i] = step * (1.0 + std::abs(x[i]));
  double f0 = f(x);
  Mat H(p, p);
  Vec xp = x;
  for (Index i = 0; i < p; ++i) {
    xp[i] = x[i] + h[i];
    double fp = f(xp);
    xp[i] = x[i] - h[i];
    double fm = f(xp);
    xp[i] = x[i];
    H(i, i) = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
    for (Index j = i + 1; j < p; ++j) {
      xp[i] = x[i] + h[i];
      xp[j] = x[j] + h[j];
      double fpp = f(xp);
      xp[j] = x[j] - h[j];
      double fpm = f(xp);
      xp[i] = x[i] - h[i];
      double fmm = f(xp);
      xp[j] = x[j] + h[j];
      double fmp = f(xp);
      xp[i] = x[i];
      xp[j] = x[j];
      H(i, j) = H(j, i) = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
    }
  }
  return H;
}

Mat covariance_from_hessian(const Mat& hessian) {
  if (hessian.rows() != hessian.cols())
    throw ConfigError("hessian must be square");
  Mat sym = 0.5 * (hessian + Mat(hessian.transpose()));
  Eigen::SelfAdjointEigenSolver<Mat> es(sym);
  if (es.info() != Eigen::Success)
    throw NumericError("hessian eigendecomposition failed");
  Vec ev = es.eigenvalues();
  if (!(ev.array() < 0.0).all()) {
    std::ostringstream msg;
    msg << "hessian is not negative definite; eigenvalues:";
    for (Index i = 0; i < ev.size(); ++i) msg << ' ' << ev[i];
    throw NumericError(msg.str());
  }
  return es.eigenvectors() * (-ev).cwiseInverse().asDiagonal() *
         es.eigenvectors().transpose();
}

Mat hessian_uncertainty(const FittedModel& fitted, double step) {
  if (fitted.mesh == nullptr)
    throw ConfigError("fitted model holds no mesh");
  auto objective = marginal_objective(*fitted.mesh, fitted.spec, fitted.trend,
                                      fitted.obs);
  Mat H = central_difference_hessian(objective, fitted.psi, step);
  return covariance_from_hessian(H);
}

// ---------------------------------------------------------------------------
// Residual diagnostics

ResidualDiagnostics residual_diagnostics(const FittedModel& fitted,
                                         const ObservationSet& obs, int bins) {
  if (bins < 1) throw ConfigError("need at least one distance bin");
  if (fitted.mesh == nullptr)
    throw ConfigError("fitted model holds no mesh");
  const TriangularMesh& mesh = *fitted.mesh;
  obs.validate(mesh);

  ResidualDiagnostics out;
  const Index N = obs.count();
  KrigingResult kr = kriging(fitted, obs.locations);
  out.residuals = obs.values - kr.mean;

  const bool sphere = mesh.manifold == Manifold::Sphere;
  auto dist = [&](Index i, Index j) -> double {
    if (!sphere) return (obs.locations.row(i) - obs.locations.row(j)).norm();
    Eigen::Vector3d a = obs.locations.row(i);
    Eigen::Vector3d b = obs.locations.row(j);
    return std::atan2(a.cross(b).norm(), a.dot(b));
  };

  double dmax = 0.0;
  for (Index i = 0; i < N; ++i)
    for (Index j = i + 1; j < N; ++j) dmax = std::max(dmax, dist(i, j));
  if (!(dmax > 0.0)) dmax = 1.0;
  const double width = bins > 1 ? dmax / (bins - 1) : dmax;

  out.bin_center.resize(bins);
  out.bin_center[0] = 0.0;
  for (int k = 1; k < bins; ++k) out.bin_center[k] = (k - 0.5) * width;
  out.bin_covariance = Vec::Zero(bins);
  out.bin_count = Eigen::VectorXi::Zero(bins);
  Vec sums = Vec::Zero(bins);
  for (Index i = 0; i < N; ++i) {
    for (Index j = i; j < N; ++j) {
      double d = (i == j) ? 0.0 : dist(i, j);
      int k = d == 0.0 ? 0 : std::min(bins - 1, 1 + int(d / width));
      sums[k] += out.residuals[i] * out.residuals[j];
      out.bin_count[k] += 1;
    }
  }
  for (int k = 0; k < bins; ++k)
    if (out.bin_count[k] > 0) out.bin_covariance[k] = sums[k] / out.bin_count[k];

  // Observations pool at their nearest node (largest basis weight in the
  // containing triangle), then each node gathers its 1-ring.
  const Index n = mesh.numVertices();
  std::vector<std::vector<int>> at_node(n);
  if (N > 0) {
    BasisEvaluation be = evaluate_basis(mesh, obs.locations);
    SparseMat PhiT = SparseMat(be.Phi.transpose());
    for (Index j = 0; j < N; ++j) {
      double best = -1.0;
      int node = -1;
      for (SparseMat::InnerIterator it(PhiT, j); it; ++it) {
        if (it.value() > best) {
          best = it.value();
          node = int(it.row());
        }
      }
      if (node >= 0) at_node[node].push_back(int(j));
    }
  }
  std::vector<std::vector<int>> ring(n);
  for (Index t = 0; t < mesh.numTriangles(); ++t) {
    for (int e = 0; e < 3; ++e) {
      int a = mesh.triangles(t, e);
      int b = mesh.triangles(t, (e + 1) % 3);
      ring[a].push_back(b);
      ring[b].push_back(a);
    }
  }
  for (auto& r : ring) {
    std::sort(r.begin(), r.end());
    r.erase(std::unique(r.begin(), r.end()), r.end());
  }

  out.node_mean = Vec::Zero(n);
  out.node_sd = Vec::Zero(n);
  out.node_count = Eigen::VectorXi::Zero(n);
  for (Index v = 0; v < n; ++v) {
    double s = 0.0, s2 = 0.0;
    int cnt = 0;
    auto take = [&](int u) {
      for (int j : at_node[u]) {
        double r = out.residuals[j];
        s += r;
        s2 += r * r;
        ++cnt;
      }
    };
    take(int(v));
    for (int u : ring[v]) take(u);
    if (cnt > 0) {
      double mean = s / cnt;
      out.node_mean[v] = mean;
      out.node_sd[v] = std::sqrt(std::max(0.0, s2 / cnt - mean * mean));
      out.node_count[v] = cnt;
    }
  }
  return out;
}

}  // namespace nspde
