#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "nestedspde/types.hpp"

namespace nspde {

enum class Manifold { Plane, Sphere };

// Triangulated domain: a planar region (2-D vertices) or the unit sphere
// (3-D unit vertices, closed, outward orientation).
struct TriangularMesh {
  Manifold manifold = Manifold::Plane;
  Mat vertices;               // numVertices x dim()
  Eigen::MatrixXi triangles;  // numTriangles x 3

  int dim() const { return manifold == Manifold::Plane ? 2 : 3; }
  Index numVertices() const { return vertices.rows(); }
  Index numTriangles() const { return triangles.rows(); }
};

// Icosahedron refined `subdivisions` times (each step splits every triangle in
// four), projected to the unit sphere: 10·4^s + 2 vertices. Vertices landing
// exactly on a pole are rotated off it by 1e-4 rad so that vector spherical
// harmonics stay evaluable at every node.
TriangularMesh build_icosphere(int subdivisions);

// Uniform rectangle grid with nx-by-ny vertices, each cell split along the
// same diagonal.
TriangularMesh build_planar_mesh(double x0, double x1, double y0, double y1,
                                 int nx, int ny);

// Comment lines starting with '#' are skipped on load, so saved meshes may
// carry "# key: value" provenance headers. Writes go to a temporary file
// that is renamed over the target once complete.
TriangularMesh load_mesh(const std::string& path);
void save_mesh(
    const TriangularMesh& mesh, const std::string& path,
    const std::vector<std::pair<std::string, std::string>>& meta = {});

// Index bounds, edge manifoldness, orientation consistency, sphere closedness
// and outwardness. Throws DataError naming the offending edge or triangle.
void validate_mesh(const TriangularMesh& mesh);

// Neighbor triangle across each edge (edge e of triangle t joins local
// vertices e and (e+1)%3; -1 on the boundary) plus one incident triangle per
// vertex; drives walking point location.
struct MeshAdjacency {
  std::vector<std::array<int, 3>> tri_neighbors;
  std::vector<int> vertex_tri;
};

MeshAdjacency build_adjacency(const TriangularMesh& mesh);

double triangle_area(const TriangularMesh& mesh, Index t);
double mesh_total_area(const TriangularMesh& mesh);

}  // namespace nspde
