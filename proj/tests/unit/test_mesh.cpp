#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>

#include "nestedspde/mesh.hpp"
#include "unit/support.hpp"

using namespace nspde;

namespace {

int edge_count(const TriangularMesh& mesh) {
  std::set<std::pair<int, int>> edges;
  for (Index t = 0; t < mesh.numTriangles(); ++t)
    for (int c = 0; c < 3; ++c) {
      int a = mesh.triangles(t, c), b = mesh.triangles(t, (c + 1) % 3);
      edges.insert({std::min(a, b), std::max(a, b)});
    }
  return static_cast<int>(edges.size());
}

std::string temp_path(const char* name) {
  return std::string("/tmp/nestedspde_test_") + name;
}

}  // namespace

TEST_CASE("icosahedron: counts, unit norms, closed oriented surface") {
  auto mesh = build_icosphere(0);
  CHECK(mesh.numVertices() == 12);
  CHECK(mesh.numTriangles() == 20);
  for (Index i = 0; i < 12; ++i)
    CHECK(mesh.vertices.row(i).norm() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK_NOTHROW(validate_mesh(mesh));
  // Euler characteristic of the sphere.
  CHECK(mesh.numVertices() - edge_count(mesh) + mesh.numTriangles() == 2);
}

TEST_CASE("icosphere subdivision counts follow 10·4^s + 2") {
  for (int s = 0; s <= 4; ++s) {
    auto mesh = build_icosphere(s);
    CHECK(mesh.numVertices() == 10 * (1 << (2 * s)) + 2);
    CHECK(mesh.numTriangles() == 20 * (1 << (2 * s)));
  }
  auto fine = build_icosphere(4);
  CHECK_NOTHROW(validate_mesh(fine));
  CHECK(fine.numVertices() - edge_count(fine) + fine.numTriangles() == 2);
}

TEST_CASE("icosphere rejects out-of-range subdivisions") {
  CHECK_THROWS_AS(build_icosphere(9), ConfigError);
  CHECK_THROWS_AS(build_icosphere(-1), ConfigError);
}

TEST_CASE("icosphere keeps every node clear of the poles") {
  for (int s : {1, 2, 3}) {
    auto mesh = build_icosphere(s);
    double worst = 0.0;
    for (Index i = 0; i < mesh.numVertices(); ++i)
      worst = std::max(worst, std::abs(mesh.vertices(i, 2)));
    CHECK(worst < 1.0 - 1e-9);
    CHECK(worst > 0.99);  // nudged nodes stay essentially polar
  }
}

TEST_CASE("planar mesh: smallest grid and area") {
  auto mesh = build_planar_mesh(0.0, 1.0, 0.0, 1.0, 2, 2);
  CHECK(mesh.numVertices() == 4);
  CHECK(mesh.numTriangles() == 2);
  CHECK_NOTHROW(validate_mesh(mesh));
  CHECK(mesh_total_area(mesh) == doctest::Approx(1.0).epsilon(1e-14));

  auto rect = build_planar_mesh(-2.0, 3.0, 1.0, 2.0, 11, 5);
  CHECK(mesh_total_area(rect) == doctest::Approx(5.0).epsilon(1e-12));
  CHECK_NOTHROW(validate_mesh(rect));
}

TEST_CASE("planar mesh rejects degenerate grids") {
  CHECK_THROWS_AS(build_planar_mesh(0, 1, 0, 1, 1, 4), ConfigError);
  CHECK_THROWS_AS(build_planar_mesh(0, 0, 0, 1, 2, 2), ConfigError);
}

TEST_CASE("mesh save/load round trip is exact") {
  for (auto mesh : {build_icosphere(1), build_planar_mesh(0, 2, -1, 1, 4, 3)}) {
    auto path = temp_path("roundtrip.txt");
    save_mesh(mesh, path);
    auto loaded = load_mesh(path);
    CHECK(loaded.manifold == mesh.manifold);
    CHECK(loaded.vertices == mesh.vertices);
    CHECK(loaded.triangles == mesh.triangles);
    std::remove(path.c_str());
  }
}

TEST_CASE("mesh loader accepts comments and reports malformed content") {
  auto path = temp_path("file.txt");
  auto write = [&](const char* body) {
    std::ofstream out(path);
    out << body;
  };

  write("# triangle\nmanifold plane\n3 1\n0 0\n1 0  # corner\n0 1\n0 1 2\n");
  CHECK_NOTHROW(load_mesh(path));

  write("manifold plane\n3 1\n0 0\n1 oops\n0 1\n0 1 2\n");
  CHECK_THROWS_WITH_AS(load_mesh(path), doctest::Contains(":4:"), DataError);

  write("manifold plane\n3 1\n0 0\n1 0\n0 1\n0 1 7\n");
  CHECK_THROWS_WITH_AS(load_mesh(path), doctest::Contains("out of range"), DataError);

  write("manifold mars\n3 1\n0 0\n1 0\n0 1\n0 1 2\n");
  CHECK_THROWS_AS(load_mesh(path), DataError);

  // Edge (0,1) borders three triangles.
  write("manifold plane\n5 3\n0 0\n1 0\n0 1\n0 -1\n1 1\n0 1 2\n1 0 3\n0 1 4\n");
  CHECK_THROWS_WITH_AS(load_mesh(path), doctest::Contains("(0, 1)"), DataError);

  // Two triangles traverse the shared edge in the same direction.
  write("manifold plane\n4 2\n0 0\n1 0\n0 1\n1 1\n0 1 2\n0 1 3\n");
  CHECK_THROWS_WITH_AS(load_mesh(path), doctest::Contains("orientation"), DataError);

  write("manifold sphere\n3 1\n0 0 2\n1 0 0\n0 1 0\n0 1 2\n");
  CHECK_THROWS_WITH_AS(load_mesh(path), doctest::Contains("norm"), DataError);

  std::remove(path.c_str());
}

TEST_CASE("adjacency is symmetric and covers interior edges") {
  auto mesh = build_icosphere(1);
  auto adj = build_adjacency(mesh);
  for (Index t = 0; t < mesh.numTriangles(); ++t)
    for (int c = 0; c < 3; ++c) {
      int nb = adj.tri_neighbors[t][c];
      CHECK(nb >= 0);  // closed surface: no boundary
      bool mutual = false;
      for (int cc = 0; cc < 3; ++cc)
        if (adj.tri_neighbors[nb][cc] == static_cast<int>(t)) mutual = true;
      CHECK(mutual);
    }
  for (Index v = 0; v < mesh.numVertices(); ++v) {
    int t = adj.vertex_tri[v];
    CHECK(t >= 0);
    bool incident = false;
    for (int c = 0; c < 3; ++c)
      if (mesh.triangles(t, c) == static_cast<int>(v)) incident = true;
    CHECK(incident);
  }
}
