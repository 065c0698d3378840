#include "nestedspde/config.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>

#include "json.hpp"
#include "nestedspde/sha256.hpp"

namespace nspde {

namespace {

using nlohmann::json;

// A config node plus its dotted location, so every error can name where in
// the file the problem sits.
struct Ctx {
  const json* j;
  std::string path;

  ConfigError fail(const std::string& msg) const {
    return ConfigError(path + ": " + msg);
  }

  bool has(const char* key) const { return j->is_object() && j->contains(key); }

  Ctx get(const char* key) const { return {&j->at(key), path + "." + key}; }

  Ctx item(std::size_t i) const {
    return {&(*j)[i], path + "[" + std::to_string(i) + "]"};
  }

  // Objects may carry only the listed keys; anything else is an error naming
  // the key and this location.
  void allowKeys(std::initializer_list<const char*> allowed) const {
    if (!j->is_object()) throw fail("expected an object");
    for (const auto& el : j->items()) {
      bool ok = false;
      for (const char* a : allowed)
        if (el.key() == a) {
          ok = true;
          break;
        }
      if (!ok) throw ConfigError("unknown key \"" + el.key() + "\" at " + path);
    }
  }

  std::size_t arraySize() const {
    if (!j->is_array()) throw fail("expected a list");
    return j->size();
  }

  double asNumber() const {
    if (!j->is_number()) throw fail("expected a number");
    return j->get<double>();
  }

  long asInteger() const {
    if (!j->is_number_integer()) throw fail("expected an integer");
    return j->get<long>();
  }

  bool asBool() const {
    if (!j->is_boolean()) throw fail("expected true or false");
    return j->get<bool>();
  }

  std::string asString() const {
    if (!j->is_string()) throw fail("expected a string");
    return j->get<std::string>();
  }

  std::string asNonemptyString() const {
    std::string s = asString();
    if (s.empty()) throw fail("path must not be empty");
    return s;
  }

  Vec asNumberList() const {
    if (!j->is_array()) throw fail("expected a list of numbers");
    Vec v(j->size());
    for (std::size_t i = 0; i < j->size(); ++i) v[i] = item(i).asNumber();
    return v;
  }

  double numberOr(const char* key, double fallback) const {
    return has(key) ? get(key).asNumber() : fallback;
  }

  long integerOr(const char* key, long fallback) const {
    return has(key) ? get(key).asInteger() : fallback;
  }

  bool boolOr(const char* key, bool fallback) const {
    return has(key) ? get(key).asBool() : fallback;
  }
};

MeshSourceConfig parse_mesh(const Ctx& c) {
  MeshSourceConfig m;
  if (!c.j->is_object()) throw c.fail("expected an object");
  if (!c.has("type"))
    throw c.fail("missing \"type\" (icosphere, planar_grid, or file)");
  std::string type = c.get("type").asString();
  if (type == "icosphere") {
    c.allowKeys({"type", "subdivisions"});
    if (!c.has("subdivisions")) throw c.fail("icosphere needs \"subdivisions\"");
    long s = c.get("subdivisions").asInteger();
    if (s < 0 || s > 8)
      throw c.get("subdivisions").fail("subdivisions must be in [0, 8]");
    m.kind = MeshSourceConfig::Kind::Icosphere;
    m.subdivisions = static_cast<int>(s);
  } else if (type == "planar_grid") {
    c.allowKeys({"type", "x0", "x1", "y0", "y1", "nx", "ny"});
    for (const char* k : {"x0", "x1", "y0", "y1", "nx", "ny"})
      if (!c.has(k)) throw c.fail(std::string("planar_grid needs \"") + k + "\"");
    m.kind = MeshSourceConfig::Kind::PlanarGrid;
    m.x0 = c.get("x0").asNumber();
    m.x1 = c.get("x1").asNumber();
    m.y0 = c.get("y0").asNumber();
    m.y1 = c.get("y1").asNumber();
    m.nx = static_cast<int>(c.get("nx").asInteger());
    m.ny = static_cast<int>(c.get("ny").asInteger());
    if (m.x1 <= m.x0) throw c.fail("x1 must exceed x0");
    if (m.y1 <= m.y0) throw c.fail("y1 must exceed y0");
    if (m.nx < 2 || m.ny < 2) throw c.fail("nx and ny must be at least 2");
  } else if (type == "file") {
    c.allowKeys({"type", "path"});
    if (!c.has("path")) throw c.fail("file mesh needs \"path\"");
    m.kind = MeshSourceConfig::Kind::File;
    m.path = c.get("path").asNonemptyString();
  } else {
    throw c.get("type").fail("mesh type must be icosphere, planar_grid, or file");
  }
  return m;
}

FieldConfig parse_scalar_field(const Ctx& c) {
  FieldConfig f;
  f.location = c.path;
  if (!c.j->is_object()) throw c.fail("expected an object");
  if (!c.has("type")) throw c.fail("missing \"type\" (constant or log_harmonic)");
  std::string type = c.get("type").asString();
  if (type == "constant") {
    c.allowKeys({"type", "value"});
    f.type = FieldConfig::Type::Constant;
    if (c.has("value")) {
      f.has_values = true;
      f.value = c.get("value").asNumber();
    }
  } else if (type == "log_harmonic") {
    c.allowKeys({"type", "max_order", "axially_symmetric", "coefficients"});
    if (!c.has("max_order")) throw c.fail("log_harmonic needs \"max_order\"");
    long order = c.get("max_order").asInteger();
    if (order < 0) throw c.get("max_order").fail("max_order must be >= 0");
    f.type = FieldConfig::Type::LogHarmonic;
    f.max_order = static_cast<int>(order);
    f.axially_symmetric = c.boolOr("axially_symmetric", false);
    if (c.has("coefficients")) {
      f.has_values = true;
      f.values = c.get("coefficients").asNumberList();
    }
  } else {
    throw c.get("type").fail("field type must be constant or log_harmonic");
  }
  return f;
}

FieldConfig parse_vector_field(const Ctx& c) {
  FieldConfig f;
  f.location = c.path;
  if (!c.j->is_object()) throw c.fail("expected an object");
  if (!c.has("type")) throw c.fail("missing \"type\" (constant or harmonic)");
  std::string type = c.get("type").asString();
  if (type == "constant") {
    c.allowKeys({"type", "components", "fixed"});
    f.type = FieldConfig::Type::ConstantVector;
    f.fixed = c.boolOr("fixed", false);
    if (c.has("components")) {
      f.has_values = true;
      f.values = c.get("components").asNumberList();
    } else if (f.fixed) {
      throw c.fail("a fixed vector needs explicit \"components\"");
    }
  } else if (type == "harmonic") {
    c.allowKeys({"type", "max_order", "axially_symmetric", "coefficients"});
    if (!c.has("max_order")) throw c.fail("harmonic needs \"max_order\"");
    long order = c.get("max_order").asInteger();
    if (order < 1)
      throw c.get("max_order").fail("vector harmonic bases start at order 1");
    f.type = FieldConfig::Type::VectorHarmonic;
    f.max_order = static_cast<int>(order);
    f.axially_symmetric = c.boolOr("axially_symmetric", false);
    if (c.has("coefficients")) {
      f.has_values = true;
      f.values = c.get("coefficients").asNumberList();
    }
  } else {
    throw c.get("type").fail("field type must be constant or harmonic");
  }
  return f;
}

ModelConfig parse_model(const Ctx& c) {
  c.allowKeys({"phi", "l1", "l2"});
  ModelConfig m;
  m.phi = c.numberOr("phi", 1.0);
  if (!(m.phi > 0.0)) throw c.get("phi").fail("phi must be positive");
  if (!c.has("l1")) throw c.fail("missing \"l1\" factor list");
  Ctx l1 = c.get("l1");
  std::size_t n1 = l1.arraySize();
  if (n1 == 0) throw l1.fail("at least one l1 factor is required");
  for (std::size_t i = 0; i < n1; ++i) {
    Ctx fc = l1.item(i);
    fc.allowKeys({"alpha", "kappa2"});
    L1FactorConfig factor;
    factor.alpha = static_cast<int>(fc.integerOr("alpha", 2));
    if (factor.alpha < 1)
      throw fc.fail("alpha must be a positive integer");
    if (!fc.has("kappa2")) throw fc.fail("missing \"kappa2\" field");
    factor.kappa2 = parse_scalar_field(fc.get("kappa2"));
    m.l1.push_back(std::move(factor));
  }
  if (c.has("l2")) {
    Ctx l2 = c.get("l2");
    std::size_t n2 = l2.arraySize();
    for (std::size_t i = 0; i < n2; ++i) {
      Ctx fc = l2.item(i);
      fc.allowKeys({"b", "B", "allow_zero_b"});
      L2FactorConfig factor;
      if (!fc.has("b")) throw fc.fail("missing \"b\" field");
      factor.b = parse_scalar_field(fc.get("b"));
      factor.allow_zero_b = fc.boolOr("allow_zero_b", false);
      if (fc.has("B")) factor.B = parse_vector_field(fc.get("B"));
      m.l2.push_back(std::move(factor));
    }
  }
  return m;
}

void parse_trend(const Ctx& c, RunConfig& cfg) {
  c.allowKeys({"kind", "max_order", "axially_symmetric", "values", "prior_mean",
               "prior_precision"});
  if (!c.has("kind")) throw c.fail("missing \"kind\" (none, constant, harmonic)");
  std::string kind = c.get("kind").asString();
  if (kind == "none") {
    c.allowKeys({"kind"});
    cfg.trend = TrendModel::none();
    return;
  }
  if (kind == "constant") {
    cfg.trend = TrendModel::constant();
  } else if (kind == "harmonic") {
    if (!c.has("max_order")) throw c.fail("harmonic trend needs \"max_order\"");
    long order = c.get("max_order").asInteger();
    if (order < 0) throw c.get("max_order").fail("max_order must be >= 0");
    cfg.trend = TrendModel::harmonic(static_cast<int>(order),
                                     c.boolOr("axially_symmetric", false));
  } else {
    throw c.get("kind").fail("trend kind must be none, constant, or harmonic");
  }
  Index q = cfg.trend.dim();
  if (c.has("values")) {
    cfg.trend_values = c.get("values").asNumberList();
    if (cfg.trend_values.size() != q)
      throw c.get("values").fail("expected " + std::to_string(q) +
                                 " trend values, found " +
                                 std::to_string(cfg.trend_values.size()));
  }
  if (c.has("prior_mean")) {
    Vec m = c.get("prior_mean").asNumberList();
    if (m.size() != q)
      throw c.get("prior_mean").fail("expected " + std::to_string(q) +
                                     " entries, found " +
                                     std::to_string(m.size()));
    cfg.trend.m_mu = m;
  }
  if (c.has("prior_precision")) {
    Ctx p = c.get("prior_precision");
    Vec diag;
    if (p.j->is_number())
      diag = Vec::Constant(q, p.asNumber());
    else
      diag = p.asNumberList();
    if (diag.size() != q)
      throw p.fail("expected " + std::to_string(q) + " entries, found " +
                   std::to_string(diag.size()));
    for (Index i = 0; i < q; ++i)
      if (!(diag[i] > 0.0)) throw p.fail("precisions must be positive");
    cfg.trend.Q_mu = diag.asDiagonal();
  }
}

void parse_optimizer(const Ctx& c, RunConfig& cfg) {
  c.allowKeys({"max_iterations", "gradient_tol", "relaxed_gradient_tol",
               "relative_objective_tol", "fd_step", "initial_from_values",
               "initial_sigma2"});
  FitOptions& o = cfg.optimizer;
  long iters = c.integerOr("max_iterations", o.max_iterations);
  if (iters < 1) throw c.get("max_iterations").fail("must be at least 1");
  o.max_iterations = static_cast<int>(iters);
  o.gradient_tol = c.numberOr("gradient_tol", o.gradient_tol);
  o.relaxed_gradient_tol = c.numberOr("relaxed_gradient_tol", o.relaxed_gradient_tol);
  o.relative_objective_tol =
      c.numberOr("relative_objective_tol", o.relative_objective_tol);
  o.fd_step = c.numberOr("fd_step", o.fd_step);
  for (auto [name, v] : {std::pair<const char*, double>{"gradient_tol", o.gradient_tol},
                         {"relaxed_gradient_tol", o.relaxed_gradient_tol},
                         {"relative_objective_tol", o.relative_objective_tol},
                         {"fd_step", o.fd_step}})
    if (!(v > 0.0)) throw c.fail(std::string(name) + " must be positive");
  cfg.initial_from_values = c.boolOr("initial_from_values", false);
  cfg.initial_sigma2 = c.numberOr("initial_sigma2", 0.0);
  if (cfg.initial_from_values && !(cfg.initial_sigma2 > 0.0))
    throw c.fail("initial_from_values needs a positive initial_sigma2");
}

void parse_simulation(const Ctx& c, SimulationConfig& sim) {
  c.allowKeys({"replicates", "observations"});
  long reps = c.integerOr("replicates", 1);
  if (reps < 1) throw c.get("replicates").fail("replicates must be at least 1");
  sim.replicates = static_cast<int>(reps);
  if (c.has("observations")) {
    Ctx o = c.get("observations");
    o.allowKeys({"count", "noise_variance", "output"});
    if (!o.has("count")) throw o.fail("missing \"count\"");
    long count = o.get("count").asInteger();
    if (count < 1) throw o.get("count").fail("count must be at least 1");
    sim.observation_count = static_cast<int>(count);
    sim.noise_variance = o.numberOr("noise_variance", 0.0);
    if (sim.noise_variance < 0.0)
      throw o.get("noise_variance").fail("noise_variance must be >= 0");
    if (o.has("output")) sim.observations_out = o.get("output").asNonemptyString();
  }
}

QueryConfig parse_predict(const Ctx& c) {
  c.allowKeys({"query", "grid", "path"});
  QueryConfig q;
  std::string kind = c.has("query") ? c.get("query").asString() : "nodes";
  if (kind == "nodes") {
    c.allowKeys({"query"});
    q.kind = QueryConfig::Kind::Nodes;
  } else if (kind == "grid") {
    c.allowKeys({"query", "grid"});
    if (!c.has("grid")) throw c.fail("grid query needs a \"grid\" object");
    Ctx g = c.get("grid");
    g.allowKeys({"x0", "x1", "y0", "y1", "nx", "ny", "lon_min", "lon_max",
                 "lat_min", "lat_max", "nlon", "nlat"});
    q.kind = QueryConfig::Kind::Grid;
    q.x0 = g.numberOr("x0", 0.0);
    q.x1 = g.numberOr("x1", 1.0);
    q.y0 = g.numberOr("y0", 0.0);
    q.y1 = g.numberOr("y1", 1.0);
    q.nx = static_cast<int>(g.integerOr("nx", 0));
    q.ny = static_cast<int>(g.integerOr("ny", 0));
    q.lon_min = g.numberOr("lon_min", -180.0);
    q.lon_max = g.numberOr("lon_max", 180.0);
    q.lat_min = g.numberOr("lat_min", -90.0);
    q.lat_max = g.numberOr("lat_max", 90.0);
    q.nlon = static_cast<int>(g.integerOr("nlon", 0));
    q.nlat = static_cast<int>(g.integerOr("nlat", 0));
    if ((q.nx != 0 && q.nx < 2) || (q.ny != 0 && q.ny < 2))
      throw g.fail("nx and ny must be at least 2");
    if ((q.nlon != 0 && q.nlon < 1) || (q.nlat != 0 && q.nlat < 1))
      throw g.fail("nlon and nlat must be at least 1");
    if (q.lon_min < -180.0 || q.lon_max > 180.0 || q.lon_min >= q.lon_max)
      throw g.fail("longitude range must be inside [-180, 180]");
    if (q.lat_min < -90.0 || q.lat_max > 90.0 || q.lat_min >= q.lat_max)
      throw g.fail("latitude range must be inside [-90, 90]");
  } else if (kind == "file") {
    c.allowKeys({"query", "path"});
    if (!c.has("path")) throw c.fail("file query needs \"path\"");
    q.kind = QueryConfig::Kind::File;
    q.path = c.get("path").asNonemptyString();
  } else {
    throw c.get("query").fail("query must be nodes, grid, or file");
  }
  return q;
}

bool safe_name(const std::string& name) {
  if (name.empty()) return false;
  for (char ch : name) {
    bool ok = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') ||
              (ch >= '0' && ch <= '9') || ch == '_' || ch == '-' || ch == '.';
    if (!ok) return false;
  }
  return true;
}

}  // namespace

std::string ModelConfig::firstFreeField() const {
  for (const auto& f : l1)
    if (!f.kappa2.has_values) return f.kappa2.location;
  for (const auto& f : l2) {
    if (!f.b.has_values) return f.b.location;
    if (f.B.type != FieldConfig::Type::Absent && !f.B.fixed && !f.B.has_values)
      return f.B.location;
  }
  return "";
}

OperatorSystemSpec build_operator_spec(const ModelConfig& model,
                                       const TriangularMesh& mesh) {
  const bool sphere = mesh.manifold == Manifold::Sphere;
  const int dim = mesh.dim();

  auto need_sphere = [&](const FieldConfig& f) {
    if (!sphere)
      throw ConfigError(f.location +
                        ": harmonic parameter fields need a sphere mesh");
  };
  auto check_coeffs = [&](const FieldConfig& f, int basis_size) -> Vec {
    if (!f.has_values) return Vec::Zero(basis_size);
    if (f.values.size() != basis_size)
      throw ConfigError(f.location + ": expected " +
                        std::to_string(basis_size) +
                        " coefficients for the order-" +
                        std::to_string(f.max_order) + " basis, found " +
                        std::to_string(f.values.size()));
    return f.values;
  };

  auto build_scalar = [&](const FieldConfig& f, bool is_b,
                          bool allow_zero) -> ParamField {
    if (f.type == FieldConfig::Type::Constant) {
      double v = f.has_values ? f.value : 1.0;
      if (f.has_values) {
        if (is_b && v == 0.0 && !allow_zero)
          throw ConfigError(f.location +
                            ": zero b needs \"allow_zero_b\": true");
        if (v < 0.0 || (!is_b && v == 0.0))
          throw ConfigError(f.location + ": value must be positive");
      }
      return ParamField::constant(v);
    }
    need_sphere(f);
    auto basis = ScalarHarmonicBasis::make(f.max_order, f.axially_symmetric);
    return ParamField::logLinear(basis, check_coeffs(f, basis.size()));
  };

  OperatorSystemSpec spec;
  spec.phi = model.phi;
  for (const auto& fc : model.l1) {
    L1Factor factor;
    factor.alpha = fc.alpha;
    factor.kappa2 = build_scalar(fc.kappa2, false, false);
    spec.l1_factors.push_back(std::move(factor));
  }
  for (const auto& fc : model.l2) {
    L2Factor factor;
    factor.allow_zero_b = fc.allow_zero_b;
    factor.b = build_scalar(fc.b, true, fc.allow_zero_b);
    switch (fc.B.type) {
      case FieldConfig::Type::Absent:
        factor.B = ParamField::fixedVector(Vec::Zero(dim));
        break;
      case FieldConfig::Type::ConstantVector: {
        Vec comp = fc.B.has_values ? fc.B.values : Vec::Zero(dim).eval();
        if (comp.size() != dim)
          throw ConfigError(fc.B.location + ": expected " +
                            std::to_string(dim) + " components, found " +
                            std::to_string(comp.size()));
        factor.B = fc.B.fixed ? ParamField::fixedVector(comp)
                              : ParamField::constantVector(comp);
        break;
      }
      case FieldConfig::Type::VectorHarmonic: {
        need_sphere(fc.B);
        auto basis =
            VectorHarmonicBasis::make(fc.B.max_order, fc.B.axially_symmetric);
        factor.B =
            ParamField::vectorLinear(basis, check_coeffs(fc.B, basis.size()));
        break;
      }
      default:
        throw ConfigError(fc.B.location + ": not a vector field");
    }
    spec.l2_factors.push_back(std::move(factor));
  }
  spec.validate(dim);
  return spec;
}

RunConfig parse_run_config(const std::string& text,
                           const std::string& source_name) {
  json root;
  try {
    root = json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(source_name + ": " + e.what());
  }
  Ctx top{&root, source_name};
  top.allowKeys({"mesh", "model", "trend", "optimizer", "io", "seed",
                 "simulation", "predict", "diagnose", "models"});

  RunConfig cfg;
  cfg.sha256 = sha256_hex(text);
  if (!top.has("mesh")) throw top.fail("missing \"mesh\" section");
  cfg.mesh = parse_mesh(top.get("mesh"));

  if (top.has("model")) {
    cfg.has_model = true;
    cfg.model = parse_model(top.get("model"));
  }
  if (top.has("trend")) parse_trend(top.get("trend"), cfg);
  if (top.has("optimizer")) parse_optimizer(top.get("optimizer"), cfg);
  if (top.has("io")) {
    Ctx io = top.get("io");
    io.allowKeys({"observations", "fitted_parameters"});
    if (io.has("observations"))
      cfg.io.observations = io.get("observations").asNonemptyString();
    if (io.has("fitted_parameters"))
      cfg.io.fitted_parameters = io.get("fitted_parameters").asNonemptyString();
  }
  if (top.has("seed")) {
    long s = top.get("seed").asInteger();
    if (s < 0) throw top.get("seed").fail("seed must be >= 0");
    cfg.seed = static_cast<std::uint64_t>(s);
  }
  if (top.has("simulation")) parse_simulation(top.get("simulation"), cfg.simulation);
  if (top.has("predict")) cfg.query = parse_predict(top.get("predict"));
  if (top.has("diagnose")) {
    Ctx d = top.get("diagnose");
    d.allowKeys({"bins"});
    long bins = d.integerOr("bins", cfg.diagnose_bins);
    if (bins < 1) throw d.get("bins").fail("bins must be at least 1");
    cfg.diagnose_bins = static_cast<int>(bins);
  }
  if (top.has("models")) {
    Ctx ms = top.get("models");
    std::size_t n = ms.arraySize();
    if (n == 0) throw ms.fail("at least one model entry is required");
    for (std::size_t i = 0; i < n; ++i) {
      Ctx entry = ms.item(i);
      entry.allowKeys({"name", "model"});
      SelectModelConfig sm;
      sm.name = entry.has("name") ? entry.get("name").asString()
                                  : "model_" + std::to_string(i);
      if (!safe_name(sm.name))
        throw entry.fail("name must use only letters, digits, '_', '-', '.'");
      for (const auto& prev : cfg.models)
        if (prev.name == sm.name)
          throw entry.fail("duplicate model name \"" + sm.name + "\"");
      if (!entry.has("model")) throw entry.fail("missing \"model\"");
      sm.model = parse_model(entry.get("model"));
      cfg.models.push_back(std::move(sm));
    }
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), path);
}

TriangularMesh make_mesh(const MeshSourceConfig& source) {
  TriangularMesh mesh;
  switch (source.kind) {
    case MeshSourceConfig::Kind::Icosphere:
      mesh = build_icosphere(source.subdivisions);
      break;
    case MeshSourceConfig::Kind::PlanarGrid:
      mesh = build_planar_mesh(source.x0, source.x1, source.y0, source.y1,
                               source.nx, source.ny);
      break;
    case MeshSourceConfig::Kind::File:
      mesh = load_mesh(source.path);
      break;
  }
  validate_mesh(mesh);
  return mesh;
}

}  // namespace nspde
