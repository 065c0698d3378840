#include "nestedspde/fem.hpp"

#include <cmath>
#include <limits>

namespace nspde {

namespace {

// Constant gradient of each linear shape function on a flat triangle, valid
// for planar triangles and sphere triangles alike (rows of the output live in
// the triangle's plane).
Mat shape_gradients(const TriangularMesh& mesh, Index t, double area) {
  Mat grads(3, mesh.dim());
  if (mesh.dim() == 2) {
    Eigen::Vector2d p[3];
    for (int c = 0; c < 3; ++c) p[c] = mesh.vertices.row(mesh.triangles(t, c));
    double signed2a = (p[1] - p[0]).x() * (p[2] - p[0]).y() -
                      (p[1] - p[0]).y() * (p[2] - p[0]).x();
    for (int c = 0; c < 3; ++c) {
      Eigen::Vector2d e = p[(c + 2) % 3] - p[(c + 1) % 3];
      grads.row(c) = Eigen::Vector2d(-e.y(), e.x()).transpose() / signed2a;
    }
  } else {
    Eigen::Vector3d p[3];
    for (int c = 0; c < 3; ++c) p[c] = mesh.vertices.row(mesh.triangles(t, c));
    Eigen::Vector3d n = (p[1] - p[0]).cross(p[2] - p[0]) / (2.0 * area);
    for (int c = 0; c < 3; ++c) {
      Eigen::Vector3d e = p[(c + 2) % 3] - p[(c + 1) % 3];
      grads.row(c) = n.cross(e).transpose() / (2.0 * area);
    }
  }
  return grads;
}

}  // namespace

FemMatrices assemble(const TriangularMesh& mesh) {
  validate_mesh(mesh);
  const Index n = mesh.numVertices();
  const Index m = mesh.numTriangles();
  const int d = mesh.dim();

  std::vector<double> area(m);
  double max_area = 0.0;
  for (Index t = 0; t < m; ++t) {
    area[t] = triangle_area(mesh, t);
    max_area = std::max(max_area, area[t]);
  }
  for (Index t = 0; t < m; ++t)
    if (area[t] < 1e-14 * max_area)
      throw DataError("assemble: triangle " + std::to_string(t) +
                      " is degenerate (area " + std::to_string(area[t]) + ")");

  std::vector<Triplet> tc, tg;
  std::vector<std::vector<Triplet>> td(d);
  tc.reserve(9 * m);
  tg.reserve(9 * m);
  for (int k = 0; k < d; ++k) td[k].reserve(9 * m);

  for (Index t = 0; t < m; ++t) {
    const double a = area[t];
    Mat grads = shape_gradients(mesh, t, a);
    for (int i = 0; i < 3; ++i) {
      int vi = mesh.triangles(t, i);
      for (int j = 0; j < 3; ++j) {
        int vj = mesh.triangles(t, j);
        tc.emplace_back(vi, vj, a / 12.0 * (i == j ? 2.0 : 1.0));
        tg.emplace_back(vi, vj, a * grads.row(i).dot(grads.row(j)));
        for (int k = 0; k < d; ++k)
          td[k].emplace_back(vi, vj, a / 3.0 * grads(j, k));
      }
    }
  }

  FemMatrices fem;
  fem.C.resize(n, n);
  fem.C.setFromTriplets(tc.begin(), tc.end());
  fem.C.makeCompressed();
  fem.G.resize(n, n);
  fem.G.setFromTriplets(tg.begin(), tg.end());
  fem.G.makeCompressed();
  fem.D.resize(d);
  for (int k = 0; k < d; ++k) {
    fem.D[k].resize(n, n);
    fem.D[k].setFromTriplets(td[k].begin(), td[k].end());
    fem.D[k].makeCompressed();
  }
  fem.c0 = fem.C * Vec::Ones(n);
  return fem;
}

namespace {

// Barycentric coordinates of q in triangle t, with q first mapped into the
// triangle's plane (gnomonic ray projection on the sphere). Returns false if
// the mapping is undefined (sphere point on the far hemisphere).
bool barycentric(const TriangularMesh& mesh, Index t, const Vec& q, Eigen::Vector3d& bary) {
  if (mesh.dim() == 2) {
    Eigen::Vector2d a = mesh.vertices.row(mesh.triangles(t, 0));
    Eigen::Vector2d b = mesh.vertices.row(mesh.triangles(t, 1));
    Eigen::Vector2d c = mesh.vertices.row(mesh.triangles(t, 2));
    Eigen::Matrix2d e;
    e.col(0) = b - a;
    e.col(1) = c - a;
    Eigen::Vector2d uv = e.inverse() * (Eigen::Vector2d(q[0], q[1]) - a);
    bary = {1.0 - uv[0] - uv[1], uv[0], uv[1]};
    return true;
  }
  Eigen::Vector3d a = mesh.vertices.row(mesh.triangles(t, 0));
  Eigen::Vector3d b = mesh.vertices.row(mesh.triangles(t, 1));
  Eigen::Vector3d c = mesh.vertices.row(mesh.triangles(t, 2));
  Eigen::Vector3d s(q[0], q[1], q[2]);
  Eigen::Vector3d n = (b - a).cross(c - a);
  double sn = s.dot(n);
  if (sn <= 0.0) return false;  // ray misses the triangle's hemisphere
  Eigen::Vector3d p = s * (a.dot(n) / sn);  // ray-plane intersection
  Eigen::Vector3d e1 = b - a, e2 = c - a, r = p - a;
  double g11 = e1.dot(e1), g12 = e1.dot(e2), g22 = e2.dot(e2);
  double det = g11 * g22 - g12 * g12;
  double u = (g22 * e1.dot(r) - g12 * e2.dot(r)) / det;
  double v = (g11 * e2.dot(r) - g12 * e1.dot(r)) / det;
  bary = {1.0 - u - v, u, v};
  return true;
}

int nearest_vertex(const TriangularMesh& mesh, const Vec& q) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < mesh.numVertices(); ++i) {
    double d = (mesh.vertices.row(i).transpose() - q).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

}  // namespace

BasisEvaluation evaluate_basis(const TriangularMesh& mesh, const Mat& points,
                               LocateStrategy strategy) {
  if (points.cols() != mesh.dim())
    throw DataError("evaluate_basis: points have dimension " +
                    std::to_string(points.cols()) + ", mesh needs " +
                    std::to_string(mesh.dim()));
  const Index np = points.rows();
  MeshAdjacency adj = build_adjacency(mesh);

  Mat pts = points;
  if (mesh.manifold == Manifold::Sphere) {
    for (Index i = 0; i < np; ++i) {
      double r = pts.row(i).norm();
      if (std::abs(r - 1.0) > 1e-6)
        throw DataError("evaluate_basis: point " + std::to_string(i) +
                        " has norm " + std::to_string(r) +
                        "; sphere locations must be unit vectors");
      pts.row(i) /= r;
    }
  }

  const double inside_tol = -1e-12;
  BasisEvaluation out;
  out.triangle.assign(np, -1);
  std::vector<Triplet> trips;
  trips.reserve(3 * np);

  for (Index i = 0; i < np; ++i) {
    Vec q = pts.row(i).transpose();
    Eigen::Vector3d bary;
    int found = -1;

    // Walk from a triangle touching the nearest vertex toward the point,
    // always crossing the edge opposite the most negative coordinate.
    int cur = strategy == LocateStrategy::WalkWithFallback
                  ? adj.vertex_tri[nearest_vertex(mesh, q)]
                  : -1;
    for (Index step = 0; cur >= 0 && step < mesh.numTriangles(); ++step) {
      if (!barycentric(mesh, cur, q, bary)) break;
      int worst = 0;
      for (int c = 1; c < 3; ++c)
        if (bary[c] < bary[worst]) worst = c;
      if (bary[worst] >= inside_tol) {
        found = cur;
        break;
      }
      // Edge opposite local vertex w joins vertices (w+1)%3 and (w+2)%3,
      // which is edge slot (w+1)%3 in the adjacency convention.
      cur = adj.tri_neighbors[cur][(worst + 1) % 3];
    }

    if (found < 0) {
      // Fallback: exhaustive scan for the best triangle.
      double best = -std::numeric_limits<double>::infinity();
      Eigen::Vector3d best_bary;
      int best_t = -1;
      for (Index t = 0; t < mesh.numTriangles(); ++t) {
        Eigen::Vector3d b;
        if (!barycentric(mesh, t, q, b)) continue;
        double m = b.minCoeff();
        if (m > best) {
          best = m;
          best_bary = b;
          best_t = static_cast<int>(t);
        }
      }
      if (best_t < 0 || best < -1e-9)
        throw DataError("evaluate_basis: point " + std::to_string(i) +
                        " lies outside the mesh");
      found = best_t;
      bary = best_bary;
    }

    double sum = 0.0;
    for (int c = 0; c < 3; ++c) {
      bary[c] = std::max(bary[c], 0.0);
      sum += bary[c];
    }
    out.triangle[i] = found;
    for (int c = 0; c < 3; ++c)
      if (bary[c] > 0.0)
        trips.emplace_back(static_cast<int>(i), mesh.triangles(found, c), bary[c] / sum);
  }

  out.Phi.resize(np, mesh.numVertices());
  out.Phi.setFromTriplets(trips.begin(), trips.end());
  out.Phi.makeCompressed();
  return out;
}

}  // namespace nspde
