#include "nestedspde/discretize.hpp"

#include <string>
#include <vector>

#include "nestedspde/rng.hpp"
#include "nestedspde/sparse.hpp"

namespace nspde {

namespace {

SparseMat diag_sparse(const Vec& d) {
  SparseMat m(d.size(), d.size());
  std::vector<Triplet> ts;
  ts.reserve(size_t(d.size()));
  for (Index i = 0; i < d.size(); ++i)
    ts.emplace_back(int(i), int(i), d[i]);
  m.setFromTriplets(ts.begin(), ts.end());
  return m;
}

SparseMat symmetrized(const SparseMat& a) {
  SparseMat at = SparseMat(a.transpose());
  return 0.5 * (a + at);
}

}  // namespace

SparseMat build_K(const TriangularMesh& mesh, const FemMatrices& fem,
                  const ParamField& kappa2) {
  Vec kv = kappa2.evalScalar(mesh.vertices);
  for (Index i = 0; i < kv.size(); ++i)
    if (!(kv[i] > 0.0))
      throw ConfigError("kappa2 must be positive at every mesh node; node " +
                        std::to_string(i) + " has value " +
                        std::to_string(kv[i]));
  return diag_sparse(kv.cwiseProduct(fem.c0)) + fem.G;
}

SparseMat build_Q_x0(const TriangularMesh& mesh, const FemMatrices& fem,
                     const std::vector<L1Factor>& l1_factors, double phi) {
  if (l1_factors.empty())
    throw ConfigError("at least one L1 factor is required");
  if (!(phi > 0.0)) throw ConfigError("phi must be positive");

  int odd = -1;
  for (size_t i = 0; i < l1_factors.size(); ++i) {
    if (l1_factors[i].alpha < 1)
      throw ConfigError("L1 factor " + std::to_string(i) +
                        ": alpha must be a positive integer");
    if (l1_factors[i].alpha % 2 == 1) {
      if (odd >= 0)
        throw ConfigError(
            "at most one L1 factor may have odd alpha: a second bare "
            "stiffness matrix has no symmetric position in the precision "
            "product; merge the factors or use even exponents");
      odd = int(i);
    }
  }

  std::vector<SparseMat> K(l1_factors.size());
  for (size_t i = 0; i < l1_factors.size(); ++i) {
    try {
      K[i] = build_K(mesh, fem, l1_factors[i].kappa2);
    } catch (const ConfigError& e) {
      throw ConfigError("L1 factor " + std::to_string(i) + ": " + e.what());
    }
  }

  Vec ci = fem.c0.cwiseInverse();
  SparseMat Q = odd >= 0 ? K[odd] : diag_sparse(fem.c0);
  auto wrap = [&](const SparseMat& Ki, int times) {
    for (int t = 0; t < times; ++t) {
      SparseMat scaled = ci.asDiagonal() * Q * ci.asDiagonal();
      Q = Ki * SparseMat(scaled * Ki);
    }
  };
  if (odd >= 0) wrap(K[odd], (l1_factors[odd].alpha - 1) / 2);
  for (size_t i = 0; i < l1_factors.size(); ++i)
    if (int(i) != odd) wrap(K[i], l1_factors[i].alpha / 2);

  Q *= 1.0 / (phi * phi);
  return symmetrized(Q);
}

SparseMat build_H(const TriangularMesh& mesh, const FemMatrices& fem,
                  const std::vector<L2Factor>& l2_factors) {
  Index n = mesh.numVertices();
  SparseMat H(n, n);
  H.setIdentity();
  if (l2_factors.empty()) return H;

  Vec ci = fem.c0.cwiseInverse();
  for (size_t i = 0; i < l2_factors.size(); ++i) {
    const auto& f = l2_factors[i];
    Vec bv = f.b.evalScalar(mesh.vertices);
    for (Index j = 0; j < n; ++j) {
      if (bv[j] < 0.0 || (bv[j] == 0.0 && !f.allow_zero_b))
        throw ConfigError("L2 factor " + std::to_string(i) +
                          ": b must be positive at every mesh node (node " +
                          std::to_string(j) + ")");
    }
    if (!f.B.isVector())
      throw ConfigError("L2 factor " + std::to_string(i) +
                        ": B must be a vector field (use a zero vector for a "
                        "pure-b factor)");
    Mat Bv = f.B.evalVector(mesh.vertices);
    if (Bv.cols() != mesh.dim())
      throw ConfigError("L2 factor " + std::to_string(i) + ": B has " +
                        std::to_string(Bv.cols()) +
                        " components, expected the mesh dimension " +
                        std::to_string(mesh.dim()));
    SparseMat Hi = diag_sparse(bv.cwiseProduct(fem.c0));
    for (size_t k = 0; k < fem.D.size(); ++k)
      Hi = Hi + SparseMat(fem.D[k] * Vec(Bv.col(k)).asDiagonal());
    H = ci.asDiagonal() * SparseMat(Hi * H);
  }
  return H;
}

DiscretizedModel discretize(const TriangularMesh& mesh, const FemMatrices& fem,
                            const OperatorSystemSpec& spec) {
  spec.validate(mesh.dim());
  DiscretizedModel model;
  model.mesh = &mesh;
  model.Q_x0 = build_Q_x0(mesh, fem, spec.l1_factors, spec.phi);
  model.H = build_H(mesh, fem, spec.l2_factors);
  // Sample-path regularity on the manifold (intrinsic dimension 2).
  model.smoothness = smoothness_check(spec, 2);
  return model;
}

DiscretizedModel discretize(const TriangularMesh& mesh,
                            const OperatorSystemSpec& spec) {
  return discretize(mesh, assemble(mesh), spec);
}

Vec simulate(const DiscretizedModel& model, const Vec& mean,
             std::uint64_t seed) {
  Index n = model.Q_x0.rows();
  if (mean.size() != 0 && mean.size() != n)
    throw ConfigError("mean vector has length " + std::to_string(mean.size()) +
                      ", expected " + std::to_string(n) + " node values");
  CholeskyFactor fac = cholesky(SparseSym(model.Q_x0));
  NormalRng rng(seed);
  Vec w0 = fac.backSolve(rng.vector(n));
  Vec x = model.H * w0;
  if (mean.size() != 0) x += mean;
  return x;
}

}  // namespace nspde
