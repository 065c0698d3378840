#include <doctest.h>

#include <cmath>

#include "nestedspde/fem.hpp"
#include "nestedspde/mesh.hpp"
#include "unit/support.hpp"

using namespace nspde;
using testsup::Rng;

namespace {

TriangularMesh single_right_triangle() {
  TriangularMesh mesh;
  mesh.manifold = Manifold::Plane;
  mesh.vertices.resize(3, 2);
  mesh.vertices << 0, 0, 1, 0, 0, 1;
  mesh.triangles.resize(1, 3);
  mesh.triangles << 0, 1, 2;
  return mesh;
}

// Independent gradient of shape function c on triangle t: fit the affine
// function through the three vertices in an orthonormal in-plane frame.
Vec fitted_gradient(const TriangularMesh& mesh, Index t, int c) {
  int d = mesh.dim();
  Vec p0 = mesh.vertices.row(mesh.triangles(t, 0)).transpose();
  Vec e1 = mesh.vertices.row(mesh.triangles(t, 1)).transpose() - p0;
  Vec e2 = mesh.vertices.row(mesh.triangles(t, 2)).transpose() - p0;
  Vec u1 = e1.normalized();
  Vec u2 = (e2 - u1.dot(e2) * u1).normalized();
  Eigen::Matrix2d a;
  a << u1.dot(e1), u2.dot(e1), u1.dot(e2), u2.dot(e2);
  // Rows of `a` are the in-plane offsets p1-p0, p2-p0; the right-hand side
  // holds the shape-function increments along those offsets.
  Eigen::Vector2d rhs{c == 1 ? 1.0 : 0.0, c == 2 ? 1.0 : 0.0};
  if (c == 0) rhs << -1.0, -1.0;
  Eigen::Vector2d g2 = a.inverse() * rhs;
  Vec g = g2[0] * u1 + g2[1] * u2;
  return g.head(d);
}

int row_nonzeros(const SparseMat& m, int row, double tol = 0.0) {
  int count = 0;
  for (int j = 0; j < m.cols(); ++j)
    if (std::abs(m.coeff(row, j)) > tol) ++count;
  return count;
}

}  // namespace

TEST_CASE("element mass matrix of the unit right triangle") {
  auto fem = assemble(single_right_triangle());
  Mat expect(3, 3);
  expect << 2, 1, 1, 1, 2, 1, 1, 1, 2;
  expect /= 24.0;
  CHECK(testsup::frob_rel_error(Mat(fem.C), expect) < 1e-15);
  CHECK((fem.c0 - Vec::Constant(3, 1.0 / 6.0)).norm() < 1e-15);
}

TEST_CASE("assembled matrices match triangle quadrature oracles") {
  auto planar = build_planar_mesh(-0.3, 1.1, 0.2, 0.9, 4, 3);
  auto sphere = build_icosphere(1);
  for (const TriangularMesh& mesh : {planar, sphere}) {
    auto fem = assemble(mesh);
    const int d = mesh.dim();
    Index n = mesh.numVertices();

    Mat c_oracle = Mat::Zero(n, n), g_oracle = Mat::Zero(n, n);
    std::vector<Mat> d_oracle(d, Mat::Zero(n, n));
    for (Index t = 0; t < mesh.numTriangles(); ++t) {
      double area = triangle_area(mesh, t);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          int vi = mesh.triangles(t, i), vj = mesh.triangles(t, j);
          auto phi = [](int c, double b0, double b1, double b2) {
            return c == 0 ? b0 : (c == 1 ? b1 : b2);
          };
          c_oracle(vi, vj) += testsup::triangle_quadrature(
              [&](double b0, double b1, double b2) {
                return phi(i, b0, b1, b2) * phi(j, b0, b1, b2);
              },
              area);
          Vec gi = fitted_gradient(mesh, t, i), gj = fitted_gradient(mesh, t, j);
          g_oracle(vi, vj) += area * gi.dot(gj);
          for (int k = 0; k < d; ++k)
            d_oracle[k](vi, vj) += testsup::triangle_quadrature(
                                       [&](double b0, double b1, double b2) {
                                         return phi(i, b0, b1, b2);
                                       },
                                       area) *
                                   gj[k];
        }
    }
    CHECK(testsup::frob_rel_error(Mat(fem.C), c_oracle) < 1e-12);
    CHECK(testsup::frob_rel_error(Mat(fem.G), g_oracle) < 1e-10);
    for (int k = 0; k < d; ++k)
      CHECK(testsup::frob_rel_error(Mat(fem.D[k]), d_oracle[k]) < 1e-10);
  }
}

TEST_CASE("mass sums to surface area; stiffness annihilates constants") {
  for (const TriangularMesh& mesh :
       {build_icosphere(2), build_planar_mesh(0, 2, 0, 1, 6, 4)}) {
    auto fem = assemble(mesh);
    double total = Mat(fem.C).sum();
    CHECK(total == doctest::Approx(mesh_total_area(mesh)).epsilon(1e-12));
    CHECK(fem.c0.sum() == doctest::Approx(mesh_total_area(mesh)).epsilon(1e-12));
    CHECK(fem.c0.minCoeff() > 0.0);
    Index n = mesh.numVertices();
    CHECK((Mat(fem.G) * Vec::Ones(n)).lpNorm<Eigen::Infinity>() < 1e-12);
    CHECK(testsup::frob_rel_error(Mat(fem.G).transpose(), Mat(fem.G)) < 1e-15);
  }
}

TEST_CASE("directional matrices integrate coordinate slopes exactly") {
  // The interpolant of the coordinate function x_k has derivative 1, so
  // D_k times nodal x_k equals the lumped mass vector.
  auto mesh = build_planar_mesh(-1, 1, 0, 3, 5, 6);
  auto fem = assemble(mesh);
  for (int k = 0; k < 2; ++k) {
    Vec xk = mesh.vertices.col(k);
    CHECK((fem.D[k] * xk - fem.c0).lpNorm<Eigen::Infinity>() < 1e-13);
  }
}

TEST_CASE("degenerate triangles are rejected") {
  TriangularMesh mesh;
  mesh.manifold = Manifold::Plane;
  mesh.vertices.resize(4, 2);
  mesh.vertices << 0, 0, 1, 0, 0.5, 1e-16, 0, 1;
  mesh.triangles.resize(2, 3);
  mesh.triangles << 0, 1, 2, 0, 2, 3;
  CHECK_THROWS_WITH_AS(assemble(mesh), doctest::Contains("degenerate"), DataError);
}

TEST_CASE("basis rows are barycentric weights") {
  auto mesh = build_planar_mesh(0, 1, 0, 1, 3, 3);
  Mat pts(3, 2);
  pts.row(0) << 0.5, 0.5;             // a grid vertex
  pts.row(1) << 0.25, 0.0;            // mid-edge
  Eigen::Vector3i tri = mesh.triangles.row(0).transpose();
  pts.row(2) = (mesh.vertices.row(tri[0]) + mesh.vertices.row(tri[1]) +
                mesh.vertices.row(tri[2])) /
               3.0;

  auto basis = evaluate_basis(mesh, pts);
  CHECK(row_nonzeros(basis.Phi, 0) == 1);
  CHECK(basis.Phi.coeff(0, 4) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(row_nonzeros(basis.Phi, 1) == 2);
  for (int i = 0; i < 3; ++i) {
    CHECK(row_nonzeros(basis.Phi, i) <= 3);
    double sum = 0.0;
    for (int j = 0; j < basis.Phi.cols(); ++j) {
      double v = basis.Phi.coeff(i, j);
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
  for (int c = 0; c < 3; ++c)
    CHECK(basis.Phi.coeff(2, tri[c]) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("linear functions are reproduced exactly on the plane") {
  auto mesh = build_planar_mesh(-1, 2, -2, 1, 7, 5);
  Rng rng(7);
  Mat pts(40, 2);
  for (int i = 0; i < 40; ++i) {
    pts(i, 0) = rng.uniform(-1.0, 2.0);
    pts(i, 1) = rng.uniform(-2.0, 1.0);
  }
  auto basis = evaluate_basis(mesh, pts);
  Vec nodal = 0.7 * mesh.vertices.col(0) - 1.3 * mesh.vertices.col(1) +
              Vec::Constant(mesh.numVertices(), 0.25);
  Vec interp = basis.Phi * nodal;
  for (int i = 0; i < 40; ++i)
    CHECK(interp[i] ==
          doctest::Approx(0.7 * pts(i, 0) - 1.3 * pts(i, 1) + 0.25).epsilon(1e-12));
}

TEST_CASE("walking and brute-force point location agree") {
  Rng rng(17);
  auto planar = build_planar_mesh(0, 1, 0, 1, 9, 9);
  Mat ppts(1000, 2);
  for (int i = 0; i < 1000; ++i) {
    ppts(i, 0) = rng.uniform();
    ppts(i, 1) = rng.uniform();
  }
  auto a = evaluate_basis(planar, ppts, LocateStrategy::WalkWithFallback);
  auto b = evaluate_basis(planar, ppts, LocateStrategy::BruteForce);
  CHECK((Mat(a.Phi) - Mat(b.Phi)).lpNorm<Eigen::Infinity>() < 1e-9);

  auto sphere = build_icosphere(2);
  Mat spts(1000, 3);
  for (int i = 0; i < 1000; ++i) {
    double z = rng.uniform(-1.0, 1.0), phi = rng.uniform(0.0, 2.0 * M_PI);
    double r = std::sqrt(1.0 - z * z);
    spts.row(i) << r * std::cos(phi), r * std::sin(phi), z;
  }
  auto sa = evaluate_basis(sphere, spts, LocateStrategy::WalkWithFallback);
  auto sb = evaluate_basis(sphere, spts, LocateStrategy::BruteForce);
  CHECK((Mat(sa.Phi) - Mat(sb.Phi)).lpNorm<Eigen::Infinity>() < 1e-9);
}

TEST_CASE("points outside the planar hull are rejected") {
  auto mesh = build_planar_mesh(0, 1, 0, 1, 3, 3);
  Mat pts(1, 2);
  pts << 1.5, 0.5;
  CHECK_THROWS_WITH_AS(evaluate_basis(mesh, pts), doctest::Contains("outside"),
                       DataError);
}

TEST_CASE("sphere points are re-normalized within tolerance only") {
  auto mesh = build_icosphere(1);
  Mat pts(1, 3);
  pts << (1.0 + 5e-7), 0.0, 0.0;
  CHECK_NOTHROW(evaluate_basis(mesh, pts));
  pts << 0.9, 0.0, 0.0;
  CHECK_THROWS_AS(evaluate_basis(mesh, pts), DataError);
}
