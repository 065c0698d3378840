#include "nestedspde/analytic.hpp"

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstring>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace nspde {

namespace {

constexpr double kPi = 3.14159265358979323846;

double bessel_k(double nu, double x) { return std::cyl_bessel_k(std::abs(nu), x); }

// Gamma-normalized Matern kernel T_mu = Gamma(mu + d/2) C^mu, entire in mu
// for r > 0 (the Gamma factor cancels against the normalization):
//   T_mu(r) = phi2 (4 pi)^{-d/2} 2^{1-mu} kappa^{-2 mu} (kappa r)^mu K_mu(kappa r)
// and satisfies dT_mu/dh_i = -(h_i / 2) T_{mu-1}.
double tkernel(double kappa, double mu, double r, double phi2, int d) {
  double x = kappa * r;
  return phi2 * std::pow(4.0 * kPi, -0.5 * d) * std::pow(2.0, 1.0 - mu) *
         std::pow(kappa, -2.0 * mu) * std::pow(x, mu) * bessel_k(mu, x);
}

// T_mu at r = 0, finite only for mu > 0.
double tkernel0(double kappa, double mu, double phi2, int d) {
  return phi2 * std::pow(4.0 * kPi, -0.5 * d) * std::tgamma(mu) *
         std::pow(kappa, -2.0 * mu);
}

double stationary_kappa2(const L1Factor& f) {
  if (!f.kappa2.isConstant())
    throw ConfigError("operation requires a stationary (constant) kappa2");
  double k2 = f.kappa2.constantValue();
  if (k2 <= 0.0) throw ConfigError("kappa2 must be positive");
  return k2;
}

// Multivariate polynomial in the lag components, exponent tuple -> coefficient.
class Poly {
 public:
  using Key = std::array<int, 3>;

  static Poly constant(double c) {
    Poly p;
    if (c != 0.0) p.terms_[{0, 0, 0}] = c;
    return p;
  }

  bool empty() const { return terms_.empty(); }

  void add(const Poly& other, double scale) {
    for (const auto& [key, c] : other.terms_) {
      double& slot = terms_[key];
      slot += scale * c;
      if (slot == 0.0) terms_.erase(key);
    }
  }

  Poly scaled(double s) const {
    Poly out;
    if (s == 0.0) return out;
    for (const auto& [key, c] : terms_) out.terms_[key] = s * c;
    return out;
  }

  Poly derivative(int i) const {
    Poly out;
    for (const auto& [key, c] : terms_) {
      if (key[i] == 0) continue;
      Key nk = key;
      nk[i] -= 1;
      out.terms_[nk] += c * key[i];
    }
    return out;
  }

  // Directional derivative along u.
  Poly directional(const Vec& u) const {
    Poly out;
    for (int i = 0; i < static_cast<int>(u.size()); ++i)
      if (u[i] != 0.0) out.add(derivative(i), u[i]);
    return out;
  }

  // Multiply by the linear form (u . h).
  Poly timesLinear(const Vec& u) const {
    Poly out;
    for (int i = 0; i < static_cast<int>(u.size()); ++i) {
      if (u[i] == 0.0) continue;
      for (const auto& [key, c] : terms_) {
        Key nk = key;
        nk[i] += 1;
        out.terms_[nk] += u[i] * c;
      }
    }
    return out;
  }

  double eval(const Vec& h) const {
    double sum = 0.0;
    for (const auto& [key, c] : terms_) {
      double term = c;
      for (int i = 0; i < 3; ++i) {
        double hi = i < h.size() ? h[i] : 0.0;
        for (int e = 0; e < key[i]; ++e) term *= hi;
      }
      sum += term;
    }
    return sum;
  }

  double constantCoefficient() const {
    auto it = terms_.find({0, 0, 0});
    return it == terms_.end() ? 0.0 : it->second;
  }

  int lowestDegree() const {
    int best = -1;
    for (const auto& [key, c] : terms_) {
      (void)c;
      int deg = key[0] + key[1] + key[2];
      if (best < 0 || deg < best) best = deg;
    }
    return best;
  }

 private:
  std::map<Key, double> terms_;
};

// One closed-form covariance term q(h) T_mu(kappa, |h|).
struct CovTerm {
  double kappa;
  double mu;
  Poly q;
};

struct StationaryL2 {
  double b;
  Vec B;
};

StationaryL2 stationary_l2(const L2Factor& f, int dim) {
  if (!f.b.isConstant() || !f.B.isConstant())
    throw ConfigError("operation requires a stationary (constant) outer factor");
  StationaryL2 out{f.b.constantValue(), f.B.constantVectorValue()};
  if (out.B.size() != dim)
    throw ConfigError("outer factor B has " + std::to_string(out.B.size()) +
                      " components; expected " + std::to_string(dim));
  return out;
}

// Term list for the latent-field covariance: partial fractions turned into
// gamma-normalized kernels, p C^{j - d/2} = p / Gamma(j) T_{j - d/2}.
std::vector<CovTerm> latent_terms(const std::vector<L1Factor>& l1_factors,
                                  int d) {
  auto pf = partial_fractions(l1_factors);
  std::vector<CovTerm> terms;
  for (const auto& t : pf.terms) {
    if (t.p == 0.0) continue;
    terms.push_back(
        {t.kappa, t.j - 0.5 * d, Poly::constant(t.p / std::tgamma(t.j))});
  }
  return terms;
}

// Apply (b^2 - grad^T B B^T grad) to every term; filtering X by (b + B^T grad)
// multiplies the spectrum by b^2 + (B^T k)^2, so the constant enters the
// covariance squared. With D the directional derivative along B, acting on
// q T_mu:
//   level mu:   b^2 q - D^2 q
//   level mu-1: (D q)(B.h) + (B.B / 2) q
//   level mu-2: -(1/4) (B.h)^2 q
std::vector<CovTerm> apply_l2_factor(const std::vector<CovTerm>& terms,
                                     double b, const Vec& B) {
  std::map<std::pair<long long, int>, CovTerm> merged;
  auto accumulate = [&](double kappa, double mu, const Poly& q, double scale) {
    if (q.empty() || scale == 0.0) return;
    long long kbits;
    static_assert(sizeof(kbits) == sizeof(kappa));
    std::memcpy(&kbits, &kappa, sizeof(kappa));
    auto key = std::make_pair(kbits, (int)std::lround(2.0 * mu));
    auto [it, inserted] = merged.try_emplace(key, CovTerm{kappa, mu, Poly()});
    it->second.q.add(q, scale);
  };
  for (const auto& t : terms) {
    Poly dq = t.q.directional(B);
    Poly d2q = dq.directional(B);
    Poly level0 = t.q.scaled(b * b);
    level0.add(d2q, -1.0);
    Poly level1 = dq.timesLinear(B);
    level1.add(t.q, 0.5 * B.squaredNorm());
    Poly level2 = t.q.timesLinear(B).timesLinear(B);
    accumulate(t.kappa, t.mu, level0, 1.0);
    accumulate(t.kappa, t.mu - 1.0, level1, 1.0);
    accumulate(t.kappa, t.mu - 2.0, level2, -0.25);
  }
  std::vector<CovTerm> out;
  for (auto& [key, term] : merged)
    if (!term.q.empty()) out.push_back(std::move(term));
  return out;
}

// Gauss-Legendre nodes/weights on [-1, 1] (Newton iteration).
void gauss_nodes(int n, std::vector<double>& x, std::vector<double>& w) {
  x.resize(n);
  w.resize(n);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double z = std::cos(kPi * (i + 0.75) / (n + 0.5));
    double pp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = 0.0;
      for (int j = 0; j < n; ++j) {
        double p2 = p1;
        p1 = p0;
        p0 = ((2 * j + 1) * z * p1 - j * p2) / (j + 1);
      }
      pp = n * (z * p0 - p1) / (z * z - 1.0);
      double dz = p0 / pp;
      z -= dz;
      if (std::abs(dz) < 1e-15) break;
    }
    x[i] = -z;
    x[n - 1 - i] = z;
    w[i] = w[n - 1 - i] = 2.0 / ((1.0 - z * z) * pp * pp);
  }
}

// Variance by direct spectral quadrature, C(0) = int S(k) dk (spectral_density
// already carries the (2 pi)^{-d} factor): product rule over directions and a
// rational substitution in radius.
double spectral_variance(const OperatorSystemSpec& spec, int d) {
  if (!smoothness_check(spec, d).continuous)
    throw NumericError(
        "covariance at zero lag does not exist: 2*sum(alpha) - 2*n2 <= d, the "
        "field is not mean-square continuous");
  std::vector<Vec> dirs;
  std::vector<double> ang_w;
  if (d == 1) {
    for (double s : {1.0, -1.0}) {
      Vec v(1);
      v << s;
      dirs.push_back(v);
      ang_w.push_back(1.0);
    }
  } else if (d == 2) {
    int na = 256;
    for (int i = 0; i < na; ++i) {
      double th = 2.0 * kPi * i / na;
      Vec v(2);
      v << std::cos(th), std::sin(th);
      dirs.push_back(v);
      ang_w.push_back(2.0 * kPi / na);
    }
  } else {
    int nz = 48, nphi = 96;
    std::vector<double> zn, zw;
    gauss_nodes(nz, zn, zw);
    for (int i = 0; i < nz; ++i) {
      double rho = std::sqrt(1.0 - zn[i] * zn[i]);
      for (int j = 0; j < nphi; ++j) {
        double phi = 2.0 * kPi * (j + 0.5) / nphi;
        Vec v(3);
        v << rho * std::cos(phi), rho * std::sin(phi), zn[i];
        dirs.push_back(v);
        ang_w.push_back(zw[i] * 2.0 * kPi / nphi);
      }
    }
  }

  double kmin = std::numeric_limits<double>::max();
  for (const auto& f : spec.l1_factors)
    kmin = std::min(kmin, std::sqrt(stationary_kappa2(f)));

  int nr = 2000;
  std::vector<double> tn, tw;
  gauss_nodes(nr, tn, tw);
  double total = 0.0;
  for (int i = 0; i < nr; ++i) {
    double t = 0.5 * (tn[i] + 1.0);
    double wt = 0.5 * tw[i];
    double r = kmin * t / (1.0 - t);
    double jac = kmin / ((1.0 - t) * (1.0 - t));
    double shell = 0.0;
    for (size_t a = 0; a < dirs.size(); ++a)
      shell += ang_w[a] * spectral_density(spec, (r * dirs[a]).eval());
    total += wt * jac * std::pow(r, d - 1) * shell;
  }
  // spectral_density already carries the (2 pi)^{-d} factor.
  return total;
}

double evaluate_terms(const std::vector<CovTerm>& terms, double phi2, int d,
                      const Vec& h, const OperatorSystemSpec& fallback_spec) {
  double r = h.norm();
  if (r > 0.0) {
    double sum = 0.0;
    for (const auto& t : terms) sum += t.q.eval(h) * tkernel(t.kappa, t.mu, r, phi2, d);
    return sum;
  }
  // Zero lag: a term q T_mu has the plain limit q(0) T_mu(0) when its shape
  // is positive; terms vanishing at 0 need lowest degree L with L + 2 mu > 0
  // (or mu = 0, where the kernel grows only logarithmically). Anything else
  // diverges or has a direction-dependent limit term-by-term, and the full
  // sum is recovered by spectral quadrature instead.
  double sum = 0.0;
  for (const auto& t : terms) {
    int deg = t.q.lowestDegree();
    if (deg < 0) continue;
    if (deg == 0) {
      if (t.mu > 0.0)
        sum += t.q.constantCoefficient() * tkernel0(t.kappa, t.mu, phi2, d);
      else
        return spectral_variance(fallback_spec, d);
    } else if (!(deg + 2.0 * t.mu > 0.0 || t.mu == 0.0)) {
      return spectral_variance(fallback_spec, d);
    }
  }
  return sum;
}

}  // namespace

void MaternParams::validate() const {
  if (nu <= 0.0) throw ConfigError("Matern shape nu must be positive");
  if (kappa <= 0.0) throw ConfigError("Matern scale kappa must be positive");
  if (phi2 <= 0.0) throw ConfigError("Matern phi2 must be positive");
  if (d < 1 || d > 3) throw ConfigError("Matern dimension must be 1, 2 or 3");
}

double matern_cov(const MaternParams& params, const Vec& h) {
  params.validate();
  double r = h.norm();
  if (r == 0.0)
    return params.phi2 * std::pow(4.0 * kPi, -0.5 * params.d) *
           std::tgamma(params.nu) / std::tgamma(params.nu + 0.5 * params.d) *
           std::pow(params.kappa, -2.0 * params.nu);
  double x = params.kappa * r;
  return std::pow(2.0, 1.0 - params.nu) * params.phi2 /
         (std::pow(4.0 * kPi, 0.5 * params.d) *
          std::tgamma(params.nu + 0.5 * params.d) *
          std::pow(params.kappa, 2.0 * params.nu)) *
         std::pow(x, params.nu) * bessel_k(params.nu, x);
}

double matern_cov_derivative(const MaternParams& params, const Vec& h, int i) {
  params.validate();
  if (params.nu <= 1.0)
    throw ConfigError("shape-lowering derivative identity requires nu > 1");
  if (i < 0 || i >= h.size())
    throw ConfigError("lag component index out of range");
  MaternParams lowered = params;
  lowered.nu = params.nu - 1.0;
  double denom = 2.0 * (params.nu + 0.5 * params.d - 1.0);
  return -h[i] / denom * matern_cov(lowered, h);
}

double spectral_density(const OperatorSystemSpec& spec, const Vec& k) {
  if (!spec.isStationary())
    throw ConfigError("spectral density requires a stationary spec");
  int d = static_cast<int>(k.size());
  spec.validate(d);
  double k2 = k.squaredNorm();
  double num = 1.0;
  for (const auto& f : spec.l2_factors) {
    auto sf = stationary_l2(f, d);
    double proj = sf.B.dot(k);
    num *= sf.b * sf.b + proj * proj;
  }
  double den = 1.0;
  for (const auto& f : spec.l1_factors)
    den *= std::pow(stationary_kappa2(f) + k2, f.alpha);
  return spec.phi * spec.phi * std::pow(2.0 * kPi, -d) * num / den;
}

double PartialFraction::reconstruct(double x) const {
  double sum = 0.0;
  for (const auto& t : terms)
    sum += t.p / std::pow(t.kappa * t.kappa + x, t.j);
  return sum;
}

PartialFraction partial_fractions(const std::vector<L1Factor>& l1_factors) {
  if (l1_factors.empty())
    throw ConfigError("partial fractions need at least one factor");
  size_t n = l1_factors.size();
  std::vector<double> k2(n);
  for (size_t i = 0; i < n; ++i) {
    k2[i] = stationary_kappa2(l1_factors[i]);
    if (l1_factors[i].alpha < 1)
      throw ConfigError("alpha must be a positive integer");
  }
  for (size_t i = 0; i < n; ++i)
    for (size_t l = i + 1; l < n; ++l)
      if (std::abs(k2[i] - k2[l]) <= 1e-10 * std::max(k2[i], k2[l]))
        throw ConfigError(
            "factors " + std::to_string(i) + " and " + std::to_string(l) +
            " have (nearly) equal kappa2; merge them into one factor");

  PartialFraction out;
  for (size_t i = 0; i < n; ++i) {
    int alpha = l1_factors[i].alpha;
    double x0 = -k2[i];
    // g(x) = prod_{l != i} (k2_l + x)^{-alpha_l}; derivatives at x0 via
    // g' = g u with u = sum_l -alpha_l / (k2_l + x).
    std::vector<double> g(alpha, 0.0), u(alpha, 0.0);
    g[0] = 1.0;
    for (size_t l = 0; l < n; ++l) {
      if (l == i) continue;
      g[0] *= std::pow(k2[l] + x0, -double(l1_factors[l].alpha));
    }
    for (int t = 0; t < alpha; ++t) {
      double tfact = 1.0;
      for (int q = 1; q <= t; ++q) tfact *= q;
      double sgn = (t % 2 == 0) ? 1.0 : -1.0;
      for (size_t l = 0; l < n; ++l) {
        if (l == i) continue;
        u[t] += -double(l1_factors[l].alpha) * sgn * tfact /
                std::pow(k2[l] + x0, t + 1);
      }
    }
    for (int r = 0; r + 1 < alpha; ++r) {
      double binom = 1.0;
      double acc = 0.0;
      for (int s = r; s >= 0; --s) {
        // binom = C(r, s), walked down from C(r, r) = 1
        acc += binom * g[s] * u[r - s];
        if (s > 0) binom = binom * s / (r - s + 1.0);
      }
      g[r + 1] = acc;
    }
    std::vector<double> fact(alpha, 1.0);
    for (int t = 2; t < alpha; ++t) fact[t] = fact[t - 1] * t;
    for (int j = 1; j <= alpha; ++j)
      out.terms.push_back({std::sqrt(k2[i]), j, g[alpha - j] / fact[alpha - j]});
  }
  return out;
}

double cov_x0(const std::vector<L1Factor>& l1_factors, double phi2,
              const Vec& h) {
  if (phi2 <= 0.0) throw ConfigError("phi2 must be positive");
  int d = static_cast<int>(h.size());
  if (d < 1 || d > 3) throw ConfigError("lag dimension must be 1, 2 or 3");
  OperatorSystemSpec fallback;
  fallback.l1_factors = l1_factors;
  fallback.phi = std::sqrt(phi2);
  return evaluate_terms(latent_terms(l1_factors, d), phi2, d, h, fallback);
}

double nested_cov(const OperatorSystemSpec& spec, const Vec& h) {
  if (!spec.isStationary())
    throw ConfigError("closed-form covariance requires a stationary spec");
  int d = static_cast<int>(h.size());
  spec.validate(d);
  auto terms = latent_terms(spec.l1_factors, d);
  for (const auto& f : spec.l2_factors) {
    auto sf = stationary_l2(f, d);
    terms = apply_l2_factor(terms, sf.b, sf.B);
  }
  return evaluate_terms(terms, spec.phi * spec.phi, d, h, spec);
}

Mat cov_fft_oracle(const OperatorSystemSpec& spec, int grid_size,
                   double extent) {
  if (!spec.isStationary())
    throw ConfigError("spectral oracle requires a stationary spec");
  spec.validate(2);
  if (grid_size < 8 || grid_size % 2 != 0)
    throw ConfigError("grid_size must be an even integer >= 8");
  if (extent <= 0.0) throw ConfigError("extent must be positive");
  double kmin = std::numeric_limits<double>::max();
  for (const auto& f : spec.l1_factors)
    kmin = std::min(kmin, std::sqrt(stationary_kappa2(f)));
  if (extent <= 8.0 / kmin)
    throw ConfigError("extent must exceed 8 / min(kappa) = " +
                      std::to_string(8.0 / kmin) + " to limit aliasing");
  if (!smoothness_check(spec, 2).continuous)
    throw NumericError(
        "spectral density is not integrable; the field has no finite "
        "variance");

  int n = grid_size;
  double dk = 2.0 * kPi / extent;
  std::vector<std::complex<double>> in(size_t(n) * n), out(size_t(n) * n);
  Vec k(2);
  // spectral_density already carries the (2 pi)^{-d} factor, so the inverse
  // transform only needs the Riemann cell dk^2.
  double scale = dk * dk;
  for (int i = 0; i < n; ++i) {
    double kx = (i <= n / 2 ? i : i - n) * dk;
    for (int j = 0; j < n; ++j) {
      double ky = (j <= n / 2 ? j : j - n) * dk;
      k << kx, ky;
      in[size_t(i) * n + j] = scale * spectral_density(spec, k);
    }
  }
  fftw_plan plan = fftw_plan_dft_2d(
      n, n, reinterpret_cast<fftw_complex*>(in.data()),
      reinterpret_cast<fftw_complex*>(out.data()), FFTW_BACKWARD, FFTW_ESTIMATE);
  fftw_execute(plan);
  fftw_destroy_plan(plan);

  Mat grid(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      grid(i, j) = out[size_t((i + n / 2) % n) * n + (j + n / 2) % n].real();
  // Exact +h / -h symmetry (indices n/2 +- a mirror onto each other).
  Mat sym = grid;
  for (int i = 1; i < n; ++i)
    for (int j = 1; j < n; ++j)
      sym(i, j) = 0.5 * (grid(i, j) + grid(n - i, n - j));
  return sym;
}

}  // namespace nspde
