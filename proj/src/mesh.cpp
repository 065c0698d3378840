#include "nestedspde/mesh.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace nspde {

namespace {

Eigen::Vector3d row3(const Mat& v, Index i) { return v.row(i).transpose(); }

// Undirected edge key.
std::pair<int, int> ekey(int a, int b) { return {std::min(a, b), std::max(a, b)}; }

void nudge_poles(Mat& vertices) {
  const double theta = 1e-4;
  for (Index i = 0; i < vertices.rows(); ++i) {
    double z = vertices(i, 2);
    if (1.0 - z * z < 1e-12) {
      vertices(i, 0) = std::sin(theta);
      vertices(i, 1) = 0.0;
      vertices(i, 2) = (z > 0 ? 1.0 : -1.0) * std::cos(theta);
    }
  }
}

}  // namespace

TriangularMesh build_icosphere(int subdivisions) {
  if (subdivisions < 0 || subdivisions > 8)
    throw ConfigError("build_icosphere: subdivisions must be in [0, 8], got " +
                      std::to_string(subdivisions));

  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Eigen::Vector3d> verts = {
      {-1, t, 0}, {1, t, 0},  {-1, -t, 0}, {1, -t, 0}, {0, -1, t},  {0, 1, t},
      {0, -1, -t}, {0, 1, -t}, {t, 0, -1},  {t, 0, 1},  {-t, 0, -1}, {-t, 0, 1}};
  for (auto& v : verts) v.normalize();
  std::vector<std::array<int, 3>> faces = {
      {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
      {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
      {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
      {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};

  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      auto key = ekey(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      Eigen::Vector3d m = (verts[a] + verts[b]).normalized();
      verts.push_back(m);
      int id = static_cast<int>(verts.size()) - 1;
      midpoint.emplace(key, id);
      return id;
    };
    std::vector<std::array<int, 3>> next;
    next.reserve(faces.size() * 4);
    for (const auto& f : faces) {
      int m01 = mid(f[0], f[1]), m12 = mid(f[1], f[2]), m20 = mid(f[2], f[0]);
      next.push_back({f[0], m01, m20});
      next.push_back({f[1], m12, m01});
      next.push_back({f[2], m20, m12});
      next.push_back({m01, m12, m20});
    }
    faces = std::move(next);
  }

  TriangularMesh mesh;
  mesh.manifold = Manifold::Sphere;
  mesh.vertices.resize(verts.size(), 3);
  for (size_t i = 0; i < verts.size(); ++i) mesh.vertices.row(i) = verts[i].transpose();
  nudge_poles(mesh.vertices);
  mesh.triangles.resize(faces.size(), 3);
  for (size_t i = 0; i < faces.size(); ++i)
    for (int c = 0; c < 3; ++c) mesh.triangles(i, c) = faces[i][c];
  return mesh;
}

TriangularMesh build_planar_mesh(double x0, double x1, double y0, double y1,
                                 int nx, int ny) {
  if (nx < 2 || ny < 2)
    throw ConfigError("build_planar_mesh: nx and ny must be at least 2");
  if (!(x1 > x0) || !(y1 > y0))
    throw ConfigError("build_planar_mesh: empty coordinate range");

  TriangularMesh mesh;
  mesh.manifold = Manifold::Plane;
  mesh.vertices.resize(static_cast<Index>(nx) * ny, 2);
  auto id = [&](int i, int j) { return j * nx + i; };
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      mesh.vertices(id(i, j), 0) = x0 + (x1 - x0) * i / (nx - 1);
      mesh.vertices(id(i, j), 1) = y0 + (y1 - y0) * j / (ny - 1);
    }
  mesh.triangles.resize(2 * static_cast<Index>(nx - 1) * (ny - 1), 3);
  Index t = 0;
  for (int j = 0; j + 1 < ny; ++j)
    for (int i = 0; i + 1 < nx; ++i) {
      int a = id(i, j), b = id(i + 1, j), c = id(i + 1, j + 1), d = id(i, j + 1);
      mesh.triangles.row(t++) << a, b, c;
      mesh.triangles.row(t++) << a, c, d;
    }
  return mesh;
}

double triangle_area(const TriangularMesh& mesh, Index t) {
  const auto tri = mesh.triangles.row(t);
  if (mesh.dim() == 2) {
    Eigen::Vector2d e1 = mesh.vertices.row(tri[1]) - mesh.vertices.row(tri[0]);
    Eigen::Vector2d e2 = mesh.vertices.row(tri[2]) - mesh.vertices.row(tri[0]);
    return 0.5 * std::abs(e1.x() * e2.y() - e1.y() * e2.x());
  }
  Eigen::Vector3d e1 = row3(mesh.vertices, tri[1]) - row3(mesh.vertices, tri[0]);
  Eigen::Vector3d e2 = row3(mesh.vertices, tri[2]) - row3(mesh.vertices, tri[0]);
  return 0.5 * e1.cross(e2).norm();
}

double mesh_total_area(const TriangularMesh& mesh) {
  double a = 0.0;
  for (Index t = 0; t < mesh.numTriangles(); ++t) a += triangle_area(mesh, t);
  return a;
}

void validate_mesh(const TriangularMesh& mesh) {
  const Index n = mesh.numVertices();
  if (mesh.vertices.cols() != mesh.dim())
    throw DataError("mesh: vertex dimension does not match manifold kind");

  for (Index t = 0; t < mesh.numTriangles(); ++t) {
    for (int c = 0; c < 3; ++c) {
      int v = mesh.triangles(t, c);
      if (v < 0 || v >= n)
        throw DataError("mesh: triangle " + std::to_string(t) +
                        " references vertex " + std::to_string(v) +
                        " out of range");
    }
    if (mesh.triangles(t, 0) == mesh.triangles(t, 1) ||
        mesh.triangles(t, 1) == mesh.triangles(t, 2) ||
        mesh.triangles(t, 0) == mesh.triangles(t, 2))
      throw DataError("mesh: triangle " + std::to_string(t) +
                      " repeats a vertex");
  }

  if (mesh.manifold == Manifold::Sphere) {
    for (Index i = 0; i < n; ++i) {
      double r = mesh.vertices.row(i).norm();
      if (std::abs(r - 1.0) > 1e-6)
        throw DataError("mesh: sphere vertex " + std::to_string(i) +
                        " has norm " + std::to_string(r));
    }
  }

  // Directed-edge multiset: manifoldness and orientation consistency.
  std::map<std::pair<int, int>, int> directed;
  for (Index t = 0; t < mesh.numTriangles(); ++t)
    for (int c = 0; c < 3; ++c) {
      int a = mesh.triangles(t, c), b = mesh.triangles(t, (c + 1) % 3);
      if (++directed[{a, b}] > 1)
        throw DataError("mesh: edge (" + std::to_string(a) + ", " +
                        std::to_string(b) +
                        ") traversed twice in the same direction "
                        "(inconsistent orientation)");
    }
  std::map<std::pair<int, int>, int> undirected;
  for (const auto& [e, c] : directed) undirected[ekey(e.first, e.second)] += c;
  for (const auto& [e, c] : undirected) {
    if (c > 2)
      throw DataError("mesh: edge (" + std::to_string(e.first) + ", " +
                      std::to_string(e.second) + ") shared by " +
                      std::to_string(c) + " triangles");
    if (mesh.manifold == Manifold::Sphere && c != 2)
      throw DataError("mesh: sphere surface is not closed at edge (" +
                      std::to_string(e.first) + ", " +
                      std::to_string(e.second) + ")");
  }

  if (mesh.manifold == Manifold::Sphere) {
    for (Index t = 0; t < mesh.numTriangles(); ++t) {
      Eigen::Vector3d a = row3(mesh.vertices, mesh.triangles(t, 0));
      Eigen::Vector3d b = row3(mesh.vertices, mesh.triangles(t, 1));
      Eigen::Vector3d c = row3(mesh.vertices, mesh.triangles(t, 2));
      if ((b - a).cross(c - a).dot(a + b + c) <= 0.0)
        throw DataError("mesh: triangle " + std::to_string(t) +
                        " is not outward oriented");
    }
  }
}

MeshAdjacency build_adjacency(const TriangularMesh& mesh) {
  MeshAdjacency adj;
  adj.tri_neighbors.assign(mesh.numTriangles(), {-1, -1, -1});
  adj.vertex_tri.assign(mesh.numVertices(), -1);
  std::map<std::pair<int, int>, std::pair<int, int>> edge_owner;  // edge -> (tri, slot)
  for (Index t = 0; t < mesh.numTriangles(); ++t) {
    for (int c = 0; c < 3; ++c) {
      int a = mesh.triangles(t, c), b = mesh.triangles(t, (c + 1) % 3);
      if (adj.vertex_tri[a] < 0) adj.vertex_tri[a] = static_cast<int>(t);
      auto key = ekey(a, b);
      auto it = edge_owner.find(key);
      if (it == edge_owner.end()) {
        edge_owner.emplace(key, std::make_pair(static_cast<int>(t), c));
      } else {
        adj.tri_neighbors[t][c] = it->second.first;
        adj.tri_neighbors[it->second.first][it->second.second] = static_cast<int>(t);
      }
    }
  }
  return adj;
}

namespace {

struct TokenReader {
  TokenReader(std::istream& s, std::string p) : in(s), path(std::move(p)) {}

  std::istream& in;
  std::string path;
  int line = 0;
  std::istringstream cur;

  bool next(std::string& tok) {
    while (true) {
      if (cur >> tok) {
        if (tok[0] == '#') {
          cur.str("");
          cur.clear();
          continue;
        }
        return true;
      }
      std::string raw;
      if (!std::getline(in, raw)) return false;
      ++line;
      auto hash = raw.find('#');
      if (hash != std::string::npos) raw.erase(hash);
      cur.str(raw);
      cur.clear();
    }
  }

  double number() {
    std::string tok;
    if (!next(tok))
      throw DataError(path + ": unexpected end of file at line " +
                      std::to_string(line));
    try {
      size_t pos = 0;
      double v = std::stod(tok, &pos);
      if (pos != tok.size()) throw std::invalid_argument(tok);
      return v;
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(line) + ": expected a number, got '" +
                      tok + "'");
    }
  }

  long integer() {
    double v = number();
    long i = static_cast<long>(v);
    if (static_cast<double>(i) != v)
      throw DataError(path + ":" + std::to_string(line) + ": expected an integer");
    return i;
  }
};

}  // namespace

TriangularMesh load_mesh(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open mesh file '" + path + "'");
  TokenReader rd(in, path);

  std::string tok;
  if (!rd.next(tok) || tok != "manifold")
    throw DataError(path + ":" + std::to_string(rd.line) +
                    ": expected 'manifold plane|sphere' header");
  if (!rd.next(tok) || (tok != "plane" && tok != "sphere"))
    throw DataError(path + ":" + std::to_string(rd.line) +
                    ": manifold must be 'plane' or 'sphere'");
  TriangularMesh mesh;
  mesh.manifold = tok == "plane" ? Manifold::Plane : Manifold::Sphere;

  long nv = rd.integer(), nt = rd.integer();
  if (nv < 3 || nt < 1)
    throw DataError(path + ": mesh must have at least 3 vertices and 1 triangle");
  mesh.vertices.resize(nv, mesh.dim());
  for (long i = 0; i < nv; ++i)
    for (int c = 0; c < mesh.dim(); ++c) mesh.vertices(i, c) = rd.number();
  mesh.triangles.resize(nt, 3);
  for (long t = 0; t < nt; ++t)
    for (int c = 0; c < 3; ++c) {
      long v = rd.integer();
      if (v < 0 || v >= nv)
        throw DataError(path + ":" + std::to_string(rd.line) + ": vertex index " +
                        std::to_string(v) + " out of range [0, " +
                        std::to_string(nv - 1) + "]");
      mesh.triangles(t, c) = static_cast<int>(v);
    }
  if (rd.next(tok))
    throw DataError(path + ":" + std::to_string(rd.line) +
                    ": trailing content '" + tok + "'");

  if (mesh.manifold == Manifold::Sphere) {
    for (long i = 0; i < nv; ++i) {
      double r = mesh.vertices.row(i).norm();
      if (std::abs(r - 1.0) > 1e-6)
        throw DataError(path + ": sphere vertex " + std::to_string(i) +
                        " has norm " + std::to_string(r) +
                        "; expected unit vectors");
      // Leave machine-precision vertices untouched so save/load round-trips
      // are bit exact.
      if (std::abs(r - 1.0) > 1e-12) mesh.vertices.row(i) /= r;
    }
  }
  validate_mesh(mesh);
  return mesh;
}

void save_mesh(const TriangularMesh& mesh, const std::string& path,
               const std::vector<std::pair<std::string, std::string>>& meta) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw DataError("cannot write mesh file '" + tmp + "'");
    for (const auto& [k, v] : meta) out << "# " << k << ": " << v << "\n";
    out << "manifold "
        << (mesh.manifold == Manifold::Plane ? "plane" : "sphere") << "\n";
    out << mesh.numVertices() << " " << mesh.numTriangles() << "\n";
    char buf[64];
    for (Index i = 0; i < mesh.numVertices(); ++i) {
      for (int c = 0; c < mesh.dim(); ++c) {
        std::snprintf(buf, sizeof buf, "%.17g", mesh.vertices(i, c));
        out << (c ? " " : "") << buf;
      }
      out << "\n";
    }
    for (Index t = 0; t < mesh.numTriangles(); ++t)
      out << mesh.triangles(t, 0) << " " << mesh.triangles(t, 1) << " "
          << mesh.triangles(t, 2) << "\n";
    out.flush();
    if (!out) throw DataError("failed writing mesh file '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw DataError("cannot rename " + tmp + " to " + path);
  }
}

}  // namespace nspde
