#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nestedspde/inference.hpp"
#include "nestedspde/mesh.hpp"
#include "nestedspde/operator_spec.hpp"
#include "nestedspde/trend.hpp"
#include "nestedspde/types.hpp"

namespace nspde {

// Where the mesh comes from. Exactly one source per config.
struct MeshSourceConfig {
  enum class Kind { Icosphere, PlanarGrid, File };

  Kind kind = Kind::Icosphere;
  int subdivisions = 0;
  double x0 = 0.0, x1 = 1.0, y0 = 0.0, y1 = 1.0;
  int nx = 2, ny = 2;
  std::string path;
};

// One parameter field as written in a config. The mesh dimension is unknown
// until the mesh section is resolved, so fields keep this intermediate form
// and become ParamFields in build_operator_spec. A field without explicit
// values is free: usable for fitting, rejected by simulation.
struct FieldConfig {
  enum class Type { Constant, ConstantVector, LogHarmonic, VectorHarmonic, Absent };

  Type type = Type::Absent;
  bool has_values = false;
  bool fixed = false;  // ConstantVector only: excluded from fitting
  double value = 1.0;
  Vec values;  // vector components or expansion coefficients
  int max_order = 0;
  bool axially_symmetric = false;
  std::string location;  // config path for error messages
};

struct L1FactorConfig {
  int alpha = 2;
  FieldConfig kappa2;
};

struct L2FactorConfig {
  FieldConfig b;
  FieldConfig B;  // Absent means no advection
  bool allow_zero_b = false;
};

struct ModelConfig {
  double phi = 1.0;
  std::vector<L1FactorConfig> l1;
  std::vector<L2FactorConfig> l2;

  // Location of the first field lacking explicit values, or empty when the
  // model is fully specified.
  std::string firstFreeField() const;
};

// Turns the intermediate form into a concrete OperatorSystemSpec for the
// given mesh. Free fields receive neutral placeholders (constants 1, zero
// coefficients); fitting overwrites them. Throws ConfigError, naming the
// config location, for harmonic fields off the sphere, component counts that
// do not match the mesh dimension, or coefficient counts that do not match
// the basis size.
OperatorSystemSpec build_operator_spec(const ModelConfig& model,
                                       const TriangularMesh& mesh);

// Prediction query set.
struct QueryConfig {
  enum class Kind { Nodes, Grid, File };

  Kind kind = Kind::Nodes;
  // Planar grid
  double x0 = 0.0, x1 = 1.0, y0 = 0.0, y1 = 1.0;
  int nx = 0, ny = 0;
  // Sphere grid, degrees
  double lon_min = -180.0, lon_max = 180.0, lat_min = -90.0, lat_max = 90.0;
  int nlon = 0, nlat = 0;
  std::string path;
};

struct SimulationConfig {
  int replicates = 1;
  // Optional synthetic observation draw from replicate 0: locations uniform
  // over the domain, values linearly interpolated plus Gaussian noise.
  int observation_count = 0;
  double noise_variance = 0.0;
  std::string observations_out = "observations.tsv";
};

struct IoConfig {
  std::string observations;
  std::string fitted_parameters;
};

// One candidate model in a selection run.
struct SelectModelConfig {
  std::string name;
  ModelConfig model;
};

struct RunConfig {
  MeshSourceConfig mesh;
  bool has_model = false;
  ModelConfig model;
  TrendModel trend;  // prior baked in when the config provides one
  Vec trend_values;  // simulation mean coefficients; empty unless given
  FitOptions optimizer;
  bool initial_from_values = false;
  double initial_sigma2 = 0.0;
  IoConfig io;
  std::uint64_t seed = 1;
  SimulationConfig simulation;
  QueryConfig query;
  int diagnose_bins = 30;
  std::vector<SelectModelConfig> models;
  std::string sha256;  // digest of the raw config bytes
};

// Parses the documented JSON schema. Unknown keys, type mismatches, and
// invariant violations throw ConfigError naming the key and its location.
RunConfig parse_run_config(const std::string& text,
                           const std::string& source_name);
RunConfig load_run_config(const std::string& path);

// Builds or loads the mesh named by the config and validates it.
TriangularMesh make_mesh(const MeshSourceConfig& source);

}  // namespace nspde
