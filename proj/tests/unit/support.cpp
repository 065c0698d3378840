#include "unit/support.hpp"

#include <cmath>

namespace testsup {

double Rng::uniform(double lo, double hi) {
  // Fixed 53-bit construction so sequences are identical across platforms.
  std::uint64_t r = eng_();
  double u = static_cast<double>(r >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

double Rng::normal() {
  double u1 = uniform(), u2 = uniform();
  while (u1 <= 1e-300) u1 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

int Rng::integer(int lo, int hi) {
  return lo + static_cast<int>(uniform(0.0, static_cast<double>(hi - lo + 1)));
}

Mat random_spd(int n, Rng& rng, double shift) {
  Mat a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = rng.normal();
  Mat s = a * a.transpose() / n + shift * Mat::Identity(n, n);
  return s;
}

SparseMat random_sparse_spd(int n, Rng& rng, int extra_per_row) {
  std::vector<nspde::Triplet> t;
  std::vector<double> diag(n, 1.0);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < extra_per_row; ++k) {
      int j = rng.integer(0, n - 1);
      if (j == i) continue;
      double v = rng.uniform(-1.0, 1.0);
      t.emplace_back(i, j, v);
      t.emplace_back(j, i, v);
      diag[i] += std::abs(v) + 0.1;
      diag[j] += std::abs(v) + 0.1;
    }
  }
  for (int i = 0; i < n; ++i) t.emplace_back(i, i, diag[i]);
  SparseMat m(n, n);
  m.setFromTriplets(t.begin(), t.end());
  m.makeCompressed();
  return m;
}

SparseMat grid_laplacian(int nx, int ny) {
  auto id = [&](int i, int j) { return i * ny + j; };
  std::vector<nspde::Triplet> t;
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < ny; ++j) {
      t.emplace_back(id(i, j), id(i, j), 4.0);
      if (i + 1 < nx) {
        t.emplace_back(id(i, j), id(i + 1, j), -1.0);
        t.emplace_back(id(i + 1, j), id(i, j), -1.0);
      }
      if (j + 1 < ny) {
        t.emplace_back(id(i, j), id(i, j + 1), -1.0);
        t.emplace_back(id(i, j + 1), id(i, j), -1.0);
      }
    }
  SparseMat m(nx * ny, nx * ny);
  m.setFromTriplets(t.begin(), t.end());
  m.makeCompressed();
  return m;
}

double dense_logdet(const Mat& a) {
  Eigen::SelfAdjointEigenSolver<Mat> es(a);
  double s = 0.0;
  for (int i = 0; i < a.rows(); ++i) s += std::log(es.eigenvalues()[i]);
  return s;
}

double frob_rel_error(const Mat& a, const Mat& b) {
  double denom = b.norm();
  if (denom == 0.0) return a.norm();
  return (a - b).norm() / denom;
}

void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights) {
  nodes.resize(n);
  weights.resize(n);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(M_PI * (i + 0.75) / (n + 0.5));
    double pp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      pp = n * (x * p1 - p0) / (x * x - 1.0);
      double dx = p1 / pp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    nodes[i] = -x;
    nodes[n - 1 - i] = x;
    double w = 2.0 / ((1.0 - x * x) * pp * pp);
    weights[i] = w;
    weights[n - 1 - i] = w;
  }
}

double sphere_quadrature(const std::function<double(double, double, double)>& f,
                         int nz, int nphi) {
  std::vector<double> z, w;
  gauss_legendre(nz, z, w);
  double sum = 0.0;
  for (int i = 0; i < nz; ++i) {
    double r = std::sqrt(std::max(0.0, 1.0 - z[i] * z[i]));
    double ring = 0.0;
    for (int j = 0; j < nphi; ++j) {
      double phi = 2.0 * M_PI * j / nphi;
      ring += f(r * std::cos(phi), r * std::sin(phi), z[i]);
    }
    sum += w[i] * ring * (2.0 * M_PI / nphi);
  }
  return sum;
}

double simpson(const std::function<double(double)>& f, double a, double b, int n) {
  if (n % 2 == 1) ++n;
  double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 == 1 ? 4.0 : 2.0);
  return s * h / 3.0;
}

double bessel_k_integral(double nu, double x) {
  nu = std::abs(nu);
  // exp(-x cosh t) is negligible past x cosh t ≈ 750; cosh(nu t) grows like
  // e^{nu t}, so push the cutoff a bit further for large orders.
  double big = (750.0 + 50.0 * nu) / x;
  double tmax = big > 1.0 ? std::acosh(big) : 1.0;
  return simpson([&](double t) { return std::exp(-x * std::cosh(t)) * std::cosh(nu * t); },
                 0.0, tmax, 20000);
}

double triangle_quadrature(
    const std::function<double(double, double, double)>& f_bary, double area) {
  // Seven-point degree-5 rule.
  static const double w0 = 9.0 / 40.0;
  static const double a1 = (6.0 + std::sqrt(15.0)) / 21.0;
  static const double w1 = (155.0 + std::sqrt(15.0)) / 1200.0;
  static const double a2 = (6.0 - std::sqrt(15.0)) / 21.0;
  static const double w2 = (155.0 - std::sqrt(15.0)) / 1200.0;
  double s = w0 * f_bary(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0);
  double b1 = 1.0 - 2.0 * a1;
  s += w1 * (f_bary(b1, a1, a1) + f_bary(a1, b1, a1) + f_bary(a1, a1, b1));
  double b2 = 1.0 - 2.0 * a2;
  s += w2 * (f_bary(b2, a2, a2) + f_bary(a2, b2, a2) + f_bary(a2, a2, b2));
  return s * area;
}

}  // namespace testsup
