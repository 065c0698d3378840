#include "nestedspde/run_commands.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <random>
#include <thread>
#include <utility>
#include <vector>

#include "nestedspde/discretize.hpp"
#include "nestedspde/fem.hpp"
#include "nestedspde/inference.hpp"
#include "nestedspde/observations.hpp"
#include "nestedspde/rng.hpp"
#include "nestedspde/table_io.hpp"
#include "nestedspde/version.hpp"

namespace nspde {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kDegree = kPi / 180.0;

using MetaList = std::vector<std::pair<std::string, std::string>>;

std::string out_path(const RunContext& ctx, const std::string& name) {
  std::filesystem::path dir = ctx.out_dir.empty() ? "." : ctx.out_dir;
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

std::string meta_safe(std::string s) {
  for (char& ch : s)
    if (ch == '\n' || ch == '\r' || ch == '\t') ch = ' ';
  return s;
}

MetaList base_meta(const RunContext& ctx, const char* command) {
  return {{"version", kVersion},
          {"command", command},
          {"config_sha256", ctx.config.sha256},
          {"seed", std::to_string(ctx.config.seed)}};
}

std::vector<std::string> location_columns(Manifold manifold) {
  if (manifold == Manifold::Plane) return {"x", "y"};
  return {"lon_deg", "lat_deg"};
}

// Display coordinates for a point table: planar points unchanged, sphere
// points as longitude/latitude in degrees.
Mat display_coords(const Mat& points, Manifold manifold) {
  if (manifold == Manifold::Plane) return points;
  Mat out(points.rows(), 2);
  for (Index i = 0; i < points.rows(); ++i) {
    double x = points(i, 0), y = points(i, 1), z = points(i, 2);
    out(i, 0) = std::atan2(y, x) / kDegree;
    out(i, 1) = std::asin(std::clamp(z, -1.0, 1.0)) / kDegree;
  }
  return out;
}

Vec lonlat_to_unit(double lon_deg, double lat_deg) {
  double lam = lon_deg * kDegree, phi = lat_deg * kDegree;
  Vec s(3);
  s << std::cos(phi) * std::cos(lam), std::cos(phi) * std::sin(lam),
      std::sin(phi);
  return s;
}

// Portable uniform doubles in [0, 1): the engine's algorithm is pinned by
// the standard, unlike std::uniform_real_distribution.
struct UniformRng {
  std::mt19937_64 eng;

  explicit UniformRng(std::uint64_t seed) : eng(seed) {}

  double next() { return static_cast<double>(eng() >> 11) * 0x1.0p-53; }
  double range(double a, double b) { return a + (b - a) * next(); }
};

Vec trend_mean_at(const RunConfig& cfg, const TriangularMesh& mesh,
                  const Mat& points) {
  if (cfg.trend.kind == TrendModel::Kind::None) return Vec::Zero(points.rows());
  if (cfg.trend_values.size() == 0)
    throw ConfigError(
        "trend.values: required for simulation (or set trend.kind to none)");
  if (cfg.trend.kind == TrendModel::Kind::Harmonic &&
      mesh.manifold != Manifold::Sphere)
    throw ConfigError("trend: harmonic trends need a sphere mesh");
  return cfg.trend.design(points) * cfg.trend_values;
}

void require_model(const RunConfig& cfg, const char* command) {
  if (!cfg.has_model)
    throw ConfigError(std::string(command) + " needs a \"model\" section");
}

void require_observations(const RunConfig& cfg, const char* command) {
  if (cfg.io.observations.empty())
    throw ConfigError("io.observations: required for " + std::string(command));
}

void require_fitted_path(const RunConfig& cfg, const char* command) {
  if (cfg.io.fitted_parameters.empty())
    throw ConfigError("io.fitted_parameters: required for " +
                      std::string(command));
}

std::string join_names(const std::vector<std::string>& names) {
  std::string out;
  for (const auto& n : names) {
    if (!out.empty()) out += ' ';
    out += n;
  }
  return out;
}

std::string join_alphas(const OperatorSystemSpec& spec) {
  std::string out;
  for (const auto& f : spec.l1_factors) {
    if (!out.empty()) out += ' ';
    out += std::to_string(f.alpha);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fitted-parameter files

void write_fitted(const RunContext& ctx, const char* command,
                  const std::string& model_name, const FittedModel& fitted,
                  const InformationCriteria& ic, const std::string& filename) {
  auto names = psi_names(fitted.spec);
  Index p = fitted.psi.size();
  Index q = fitted.mu_hat.size();

  Table t;
  t.meta = base_meta(ctx, command);
  if (!model_name.empty()) t.meta.emplace_back("model", model_name);
  t.meta.emplace_back("parameters", join_names(names));
  t.meta.emplace_back("trend_dimension", std::to_string(q));
  t.meta.emplace_back("alpha", join_alphas(fitted.spec));
  t.meta.emplace_back("phi", format_double(fitted.spec.phi));
  t.meta.emplace_back("observation_count",
                      std::to_string(fitted.obs.count()));
  t.meta.emplace_back("stages", std::to_string(fitted.stage_objectives.size()));
  t.meta.emplace_back("message", meta_safe(fitted.message));

  t.columns = names;
  for (Index j = 0; j < q; ++j) t.columns.push_back("mu_" + std::to_string(j));
  for (const char* c : {"log_marginal", "aic", "bic", "converged",
                        "parameter_count", "iterations"})
    t.columns.push_back(c);

  t.rows.resize(1, p + q + 6);
  t.rows.block(0, 0, 1, p) = fitted.psi.transpose();
  if (q > 0) t.rows.block(0, p, 1, q) = fitted.mu_hat.transpose();
  t.rows(0, p + q + 0) = fitted.log_marginal;
  t.rows(0, p + q + 1) = ic.aic;
  t.rows(0, p + q + 2) = ic.bic;
  t.rows(0, p + q + 3) = fitted.converged ? 1.0 : 0.0;
  t.rows(0, p + q + 4) = ic.parameter_count;
  t.rows(0, p + q + 5) = fitted.iterations;
  save_table(t, out_path(ctx, filename));
}

struct LoadedFit {
  Vec psi;
  Vec mu;
  double sigma2 = 1.0;
};

// Reads a fitted-parameter file back and checks it against the configured
// model shape: the packed parameter list, and when recorded, the trend
// dimension, operator orders, and phi.
LoadedFit read_fitted(const std::string& path, const OperatorSystemSpec& spec,
                      const TrendModel& trend) {
  Table t = load_table(path);
  if (t.rows.rows() != 1)
    throw DataError(path + ": expected one parameter row, found " +
                    std::to_string(t.rows.rows()));
  auto names = psi_names(spec);
  std::string joined = join_names(names);
  if (const std::string* rec = t.findMeta("parameters"); rec && *rec != joined)
    throw DataError(path + ": parameter layout (" + *rec +
                    ") does not match the configured model (" + joined + ")");
  Index q = trend.dim();
  if (const std::string* td = t.findMeta("trend_dimension");
      td && *td != std::to_string(q))
    throw DataError(path + ": trend dimension " + *td +
                    " does not match the configured trend (" +
                    std::to_string(q) + ")");
  if (const std::string* al = t.findMeta("alpha"); al && *al != join_alphas(spec))
    throw DataError(path + ": operator orders (" + *al +
                    ") do not match the configured model (" +
                    join_alphas(spec) + ")");
  if (const std::string* ph = t.findMeta("phi");
      ph && *ph != format_double(spec.phi))
    throw DataError(path + ": phi " + *ph + " does not match the configured " +
                    format_double(spec.phi));

  auto col = [&](const std::string& name) -> double {
    for (std::size_t i = 0; i < t.columns.size(); ++i)
      if (t.columns[i] == name) return t.rows(0, static_cast<Index>(i));
    throw DataError(path + ": missing column \"" + name +
                    "\"; the file does not match the configured model");
  };
  LoadedFit lf;
  lf.psi.resize(static_cast<Index>(names.size()));
  for (std::size_t i = 0; i < names.size(); ++i)
    lf.psi[static_cast<Index>(i)] = col(names[i]);
  lf.mu.resize(q);
  for (Index j = 0; j < q; ++j) lf.mu[j] = col("mu_" + std::to_string(j));
  lf.sigma2 = std::exp(lf.psi[0]);
  return lf;
}

// ---------------------------------------------------------------------------
// Prediction queries

Mat query_points(const QueryConfig& q, const TriangularMesh& mesh) {
  switch (q.kind) {
    case QueryConfig::Kind::Nodes:
      return mesh.vertices;
    case QueryConfig::Kind::Grid: {
      if (mesh.manifold == Manifold::Plane) {
        if (q.nx < 2 || q.ny < 2)
          throw ConfigError(
              "predict.grid: planar grids need nx, ny, x0, x1, y0, y1");
        Mat pts(static_cast<Index>(q.nx) * q.ny, 2);
        for (int j = 0; j < q.ny; ++j)
          for (int i = 0; i < q.nx; ++i) {
            Index r = static_cast<Index>(j) * q.nx + i;
            pts(r, 0) = q.x0 + (q.x1 - q.x0) * i / (q.nx - 1);
            pts(r, 1) = q.y0 + (q.y1 - q.y0) * j / (q.ny - 1);
          }
        return pts;
      }
      if (q.nlon < 1 || q.nlat < 1)
        throw ConfigError("predict.grid: sphere grids need nlon and nlat");
      Mat pts(static_cast<Index>(q.nlon) * q.nlat, 3);
      for (int j = 0; j < q.nlat; ++j)
        for (int i = 0; i < q.nlon; ++i) {
          double lon = q.nlon == 1
                           ? 0.5 * (q.lon_min + q.lon_max)
                           : q.lon_min + (q.lon_max - q.lon_min) * i / (q.nlon - 1);
          double lat = q.nlat == 1
                           ? 0.5 * (q.lat_min + q.lat_max)
                           : q.lat_min + (q.lat_max - q.lat_min) * j / (q.nlat - 1);
          pts.row(static_cast<Index>(j) * q.nlon + i) =
              lonlat_to_unit(lon, lat).transpose();
        }
      return pts;
    }
    case QueryConfig::Kind::File:
      break;
  }
  Table t = load_table(q.path);
  bool planar = mesh.manifold == Manifold::Plane;
  auto want = location_columns(mesh.manifold);
  bool shape_ok = (t.columns.size() == 2 || t.columns.size() == 3) &&
                  t.columns[0] == want[0] && t.columns[1] == want[1] &&
                  (t.columns.size() == 2 || t.columns[2] == "value");
  if (!shape_ok)
    throw DataError(q.path + ": expected columns (" + want[0] + ", " + want[1] +
                    "[, value])");
  if (planar) return t.rows.leftCols(2);
  Mat pts(t.rows.rows(), 3);
  for (Index i = 0; i < t.rows.rows(); ++i) {
    double lon = t.rows(i, 0), lat = t.rows(i, 1);
    if (lon < -180.0 || lon > 180.0 || lat < -90.0 || lat > 90.0)
      throw DataError(q.path + ": longitude/latitude out of range at row " +
                      std::to_string(i + 1));
    pts.row(i) = lonlat_to_unit(lon, lat).transpose();
  }
  return pts;
}

// ---------------------------------------------------------------------------
// Model selection: structure nesting and estimate transfer

bool contains_index(const std::vector<std::pair<int, int>>& haystack, int k,
                    int m) {
  for (const auto& [hk, hm] : haystack)
    if (hk == k && hm == m) return true;
  return false;
}

bool contains_key(const std::vector<VectorHarmonicBasis::Key>& haystack,
                  const VectorHarmonicBasis::Key& key) {
  for (const auto& h : haystack)
    if (h.family == key.family && h.k == key.k && h.m == key.m) return true;
  return false;
}

bool scalar_nests(const ParamField& from, const ParamField& to) {
  using K = ParamField::Kind;
  if (to.kind() == K::Constant) return from.kind() == K::Constant;
  if (from.kind() == K::Constant) return true;
  if (from.kind() != K::LogLinear) return false;
  for (const auto& [k, m] : from.scalarBasis().indices)
    if (!contains_index(to.scalarBasis().indices, k, m)) return false;
  return true;
}

bool vector_nests(const ParamField& from, const ParamField& to) {
  using K = ParamField::Kind;
  if (to.kind() != K::VectorLinear) return from.kind() != K::VectorLinear;
  if (from.kind() != K::VectorLinear) return true;
  for (const auto& key : from.vectorBasis().indices)
    if (!contains_key(to.vectorBasis().indices, key)) return false;
  return true;
}

// True when every estimate of `from` has a slot (or a harmless zero start)
// in `to`, so a fit of `to` can begin at the fitted values of `from`.
bool spec_nests(const OperatorSystemSpec& from, const OperatorSystemSpec& to) {
  if (from.n1() != to.n1() || from.n2() != to.n2()) return false;
  for (int i = 0; i < from.n1(); ++i) {
    if (from.l1_factors[i].alpha != to.l1_factors[i].alpha) return false;
    if (!scalar_nests(from.l1_factors[i].kappa2, to.l1_factors[i].kappa2))
      return false;
  }
  for (int i = 0; i < from.n2(); ++i) {
    if (!scalar_nests(from.l2_factors[i].b, to.l2_factors[i].b)) return false;
    if (!vector_nests(from.l2_factors[i].B, to.l2_factors[i].B)) return false;
  }
  return true;
}

void seed_scalar(const ParamField& from, ParamField& to) {
  if (to.isConstant()) {
    to = ParamField::constant(from.constantValue());
    return;
  }
  const auto& basis = to.scalarBasis();
  Vec c = Vec::Zero(basis.size());
  if (from.isConstant()) {
    // Y_00 is constant (4 pi)^{-1/2}, so this coefficient reproduces the
    // donor's constant exactly.
    c[0] = std::log(from.constantValue()) * std::sqrt(4.0 * kPi);
  } else {
    const auto& fb = from.scalarBasis();
    for (int i = 0; i < fb.size(); ++i)
      for (int j = 0; j < basis.size(); ++j)
        if (basis.indices[j] == fb.indices[i]) c[j] = from.coefficients()[i];
  }
  to.setCoefficients(c);
}

void seed_vector(const ParamField& from, ParamField& to) {
  using K = ParamField::Kind;
  if (to.isFixed()) return;
  if (to.kind() == K::Constant) {
    if (from.kind() != K::VectorLinear)
      to = ParamField::constantVector(from.constantVectorValue());
    return;
  }
  if (from.kind() != K::VectorLinear) return;  // no constant counterpart
  const auto& fb = from.vectorBasis();
  const auto& tb = to.vectorBasis();
  Vec c = Vec::Zero(tb.size());
  for (int i = 0; i < fb.size(); ++i)
    for (int j = 0; j < tb.size(); ++j) {
      const auto& a = fb.indices[i];
      const auto& b = tb.indices[j];
      if (a.family == b.family && a.k == b.k && a.m == b.m)
        c[j] = from.coefficients()[i];
    }
  to.setCoefficients(c);
}

Vec seed_psi(const FittedModel& donor, OperatorSystemSpec target) {
  for (int i = 0; i < target.n1(); ++i)
    seed_scalar(donor.spec.l1_factors[i].kappa2, target.l1_factors[i].kappa2);
  for (int i = 0; i < target.n2(); ++i) {
    seed_scalar(donor.spec.l2_factors[i].b, target.l2_factors[i].b);
    seed_vector(donor.spec.l2_factors[i].B, target.l2_factors[i].B);
  }
  return pack_psi(target, donor.sigma2);
}

}  // namespace

// ---------------------------------------------------------------------------

void run_mesh(const RunContext& ctx) {
  TriangularMesh mesh = make_mesh(ctx.config.mesh);
  MetaList meta = base_meta(ctx, "mesh");
  meta.emplace_back("manifold",
                    mesh.manifold == Manifold::Plane ? "plane" : "sphere");
  meta.emplace_back("vertices", std::to_string(mesh.numVertices()));
  meta.emplace_back("triangles", std::to_string(mesh.numTriangles()));
  save_mesh(mesh, out_path(ctx, "mesh.txt"), meta);
}

void run_simulate(const RunContext& ctx) {
  const RunConfig& cfg = ctx.config;
  require_model(cfg, "simulate");
  if (std::string free = cfg.model.firstFreeField(); !free.empty())
    throw ConfigError(free +
                      ": no value given; simulation needs every parameter "
                      "specified");
  TriangularMesh mesh = make_mesh(cfg.mesh);
  OperatorSystemSpec spec = build_operator_spec(cfg.model, mesh);
  Vec mean = trend_mean_at(cfg, mesh, mesh.vertices);
  DiscretizedModel model = discretize(mesh, spec);

  int reps = cfg.simulation.replicates;
  Index n = mesh.numVertices();
  Mat fields(n, reps);
  for (int r = 0; r < reps; ++r)
    fields.col(r) = simulate(model, Vec(), cfg.seed + r);

  Table table;
  table.meta = base_meta(ctx, "simulate");
  table.meta.emplace_back("manifold",
                          mesh.manifold == Manifold::Plane ? "plane" : "sphere");
  table.meta.emplace_back("replicates", std::to_string(reps));
  table.columns = location_columns(mesh.manifold);
  for (int r = 0; r < reps; ++r)
    table.columns.push_back("seed_" + std::to_string(cfg.seed + r));
  table.rows.resize(n, 2 + reps);
  table.rows.leftCols(2) = display_coords(mesh.vertices, mesh.manifold);
  table.rows.rightCols(reps) = fields.colwise() + mean;
  save_table(table, out_path(ctx, "simulation.tsv"));

  if (cfg.simulation.observation_count > 0) {
    Index count = cfg.simulation.observation_count;
    Mat locs(count, mesh.dim());
    UniformRng uni(cfg.seed + reps);
    if (mesh.manifold == Manifold::Plane) {
      Vec lo = mesh.vertices.colwise().minCoeff().transpose();
      Vec hi = mesh.vertices.colwise().maxCoeff().transpose();
      for (Index i = 0; i < count; ++i) {
        locs(i, 0) = uni.range(lo[0], hi[0]);
        locs(i, 1) = uni.range(lo[1], hi[1]);
      }
    } else {
      for (Index i = 0; i < count; ++i) {
        // Area-uniform: z uniform, longitude uniform.
        double z = uni.range(-1.0, 1.0);
        double lam = uni.range(-kPi, kPi);
        double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        locs(i, 0) = r * std::cos(lam);
        locs(i, 1) = r * std::sin(lam);
        locs(i, 2) = z;
      }
    }
    ObservationSet obs;
    obs.locations = locs;
    obs.values = evaluate_basis(mesh, locs).Phi * fields.col(0) +
                 trend_mean_at(cfg, mesh, locs);
    if (cfg.simulation.noise_variance > 0.0) {
      NormalRng noise(cfg.seed + reps + 1);
      obs.values += std::sqrt(cfg.simulation.noise_variance) *
                    noise.vector(count);
    }
    MetaList meta = base_meta(ctx, "simulate");
    meta.emplace_back("count", std::to_string(count));
    meta.emplace_back("noise_variance",
                      format_double(cfg.simulation.noise_variance));
    save_observations(obs, mesh.manifold,
                      out_path(ctx, cfg.simulation.observations_out), meta);
  }
}

void run_fit(const RunContext& ctx) {
  const RunConfig& cfg = ctx.config;
  require_model(cfg, "fit");
  require_observations(cfg, "fit");
  TriangularMesh mesh = make_mesh(cfg.mesh);
  OperatorSystemSpec spec = build_operator_spec(cfg.model, mesh);
  ObservationSet obs = load_observations(cfg.io.observations, mesh.manifold);

  FitOptions options = cfg.optimizer;
  if (cfg.initial_from_values) {
    if (std::string free = cfg.model.firstFreeField(); !free.empty())
      throw ConfigError(free +
                        ": initial_from_values needs every parameter "
                        "specified");
    options.initial_psi = pack_psi(spec, cfg.initial_sigma2);
  }

  FittedModel fitted = fit(mesh, spec, cfg.trend, obs, options);
  InformationCriteria ic = information_criteria(fitted);
  write_fitted(ctx, "fit", "", fitted, ic, "fitted_parameters.tsv");

  Table log;
  log.meta = base_meta(ctx, "fit");
  log.meta.emplace_back("message", meta_safe(fitted.message));
  log.meta.emplace_back("converged", fitted.converged ? "true" : "false");
  log.meta.emplace_back("iterations", std::to_string(fitted.iterations));
  log.columns = {"stage", "objective"};
  log.rows.resize(static_cast<Index>(fitted.stage_objectives.size()), 2);
  for (std::size_t s = 0; s < fitted.stage_objectives.size(); ++s) {
    log.rows(static_cast<Index>(s), 0) = static_cast<double>(s);
    log.rows(static_cast<Index>(s), 1) = fitted.stage_objectives[s];
  }
  save_table(log, out_path(ctx, "fit_log.tsv"));
}

void run_predict(const RunContext& ctx) {
  const RunConfig& cfg = ctx.config;
  require_model(cfg, "predict");
  require_observations(cfg, "predict");
  require_fitted_path(cfg, "predict");
  TriangularMesh mesh = make_mesh(cfg.mesh);
  OperatorSystemSpec spec = build_operator_spec(cfg.model, mesh);
  ObservationSet obs = load_observations(cfg.io.observations, mesh.manifold);
  LoadedFit lf = read_fitted(cfg.io.fitted_parameters, spec, cfg.trend);

  double sigma2 = 1.0;
  unpack_psi(lf.psi, spec, sigma2);
  Mat query = query_points(cfg.query, mesh);
  DiscretizedModel model = discretize(mesh, spec);
  KrigingResult kr = kriging(model, cfg.trend, obs, sigma2, query);

  Table t;
  t.meta = base_meta(ctx, "predict");
  t.meta.emplace_back("count", std::to_string(query.rows()));
  t.meta.emplace_back("sigma2", format_double(sigma2));
  t.columns = location_columns(mesh.manifold);
  t.columns.push_back("mean");
  t.columns.push_back("sd");
  t.rows.resize(query.rows(), 4);
  t.rows.leftCols(2) = display_coords(query, mesh.manifold);
  t.rows.col(2) = kr.mean;
  t.rows.col(3) = kr.sd;
  save_table(t, out_path(ctx, "predictions.tsv"));
}

void run_select(const RunContext& ctx) {
  const RunConfig& cfg = ctx.config;
  if (cfg.models.empty())
    throw ConfigError("select needs a \"models\" list");
  require_observations(cfg, "select");
  TriangularMesh mesh = make_mesh(cfg.mesh);
  ObservationSet obs = load_observations(cfg.io.observations, mesh.manifold);

  const int n = static_cast<int>(cfg.models.size());
  std::vector<OperatorSystemSpec> specs(n);
  std::vector<std::string> errors(n);
  // char, not bool: threads write distinct elements concurrently and
  // vector<bool> packs bits.
  std::vector<char> usable(n, 0);
  for (int j = 0; j < n; ++j) {
    try {
      specs[j] = build_operator_spec(cfg.models[j].model, mesh);
      usable[j] = true;
    } catch (const std::exception& e) {
      errors[j] = e.what();
    }
  }

  // Donor: the nearest preceding model whose structure nests inside this
  // one. Chains of nesting models therefore pass estimates forward in list
  // order; unrelated models fit independently.
  std::vector<int> donor(n, -1), level(n, 0);
  for (int j = 0; j < n; ++j) {
    if (!usable[j]) continue;
    for (int i = j - 1; i >= 0; --i)
      if (usable[i] && spec_nests(specs[i], specs[j])) {
        donor[j] = i;
        break;
      }
    level[j] = donor[j] < 0 ? 0 : level[donor[j]] + 1;
  }

  std::vector<std::optional<FittedModel>> results(n);
  std::vector<char> seeded(n, 0);
  auto fit_one = [&](int j) {
    try {
      FitOptions options = cfg.optimizer;
      if (donor[j] >= 0 && results[donor[j]].has_value()) {
        try {
          options.initial_psi = seed_psi(*results[donor[j]], specs[j]);
          seeded[j] = true;
        } catch (const std::exception&) {
          options.initial_psi.resize(0);
        }
      }
      try {
        results[j] = fit(mesh, specs[j], cfg.trend, obs, options);
      } catch (const std::exception&) {
        if (options.initial_psi.size() == 0) throw;
        // A transferred start can fail where staged initialization
        // succeeds; retry cold before recording a failure.
        options.initial_psi.resize(0);
        seeded[j] = false;
        results[j] = fit(mesh, specs[j], cfg.trend, obs, options);
      }
    } catch (const std::exception& e) {
      errors[j] = e.what();
    }
  };

  int max_level = 0;
  for (int j = 0; j < n; ++j) max_level = std::max(max_level, level[j]);
  int threads = std::max(1, ctx.threads);
  for (int lv = 0; lv <= max_level; ++lv) {
    std::vector<int> batch;
    for (int j = 0; j < n; ++j)
      if (usable[j] && level[j] == lv) batch.push_back(j);
    for (std::size_t start = 0; start < batch.size();
         start += static_cast<std::size_t>(threads)) {
      std::size_t stop =
          std::min(batch.size(), start + static_cast<std::size_t>(threads));
      if (stop - start == 1) {
        fit_one(batch[start]);
        continue;
      }
      std::vector<std::thread> pool;
      for (std::size_t k = start; k < stop; ++k)
        pool.emplace_back(fit_one, batch[k]);
      for (auto& th : pool) th.join();
    }
  }

  struct Row {
    int index;
    InformationCriteria ic;
    const FittedModel* fitted;
  };
  std::vector<Row> rows;
  for (int j = 0; j < n; ++j) {
    if (!results[j].has_value()) continue;
    rows.push_back({j, information_criteria(*results[j]), &*results[j]});
    write_fitted(ctx, "select", cfg.models[j].name, *results[j], rows.back().ic,
                 "fitted_parameters_" + cfg.models[j].name + ".tsv");
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return a.ic.bic < b.ic.bic;
  });

  Table t;
  t.meta = base_meta(ctx, "select");
  t.meta.emplace_back("models", std::to_string(n));
  for (int j = 0; j < n; ++j)
    t.meta.emplace_back("model_" + std::to_string(j), cfg.models[j].name);
  for (int j = 0; j < n; ++j)
    if (seeded[j])
      t.meta.emplace_back("initialized_from_" + cfg.models[j].name,
                          cfg.models[donor[j]].name);
  for (int j = 0; j < n; ++j)
    if (!results[j].has_value())
      t.meta.emplace_back("failed_" + cfg.models[j].name,
                          meta_safe(errors[j]));
  t.columns = {"model_index",     "parameter_count", "log_marginal", "aic",
               "bic",             "converged",       "iterations"};
  t.rows.resize(static_cast<Index>(rows.size()), 7);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Row& row = rows[r];
    Index i = static_cast<Index>(r);
    t.rows(i, 0) = row.index;
    t.rows(i, 1) = row.ic.parameter_count;
    t.rows(i, 2) = row.fitted->log_marginal;
    t.rows(i, 3) = row.ic.aic;
    t.rows(i, 4) = row.ic.bic;
    t.rows(i, 5) = row.fitted->converged ? 1.0 : 0.0;
    t.rows(i, 6) = row.fitted->iterations;
  }
  save_table(t, out_path(ctx, "model_selection.tsv"));
}

void run_diagnose(const RunContext& ctx) {
  const RunConfig& cfg = ctx.config;
  require_model(cfg, "diagnose");
  require_observations(cfg, "diagnose");
  require_fitted_path(cfg, "diagnose");
  TriangularMesh mesh = make_mesh(cfg.mesh);
  OperatorSystemSpec spec = build_operator_spec(cfg.model, mesh);
  ObservationSet obs = load_observations(cfg.io.observations, mesh.manifold);
  LoadedFit lf = read_fitted(cfg.io.fitted_parameters, spec, cfg.trend);

  FittedModel fitted;
  fitted.trend = cfg.trend;
  fitted.obs = obs;
  fitted.mesh = &mesh;
  fitted.psi = lf.psi;
  fitted.mu_hat = lf.mu;
  unpack_psi(lf.psi, spec, fitted.sigma2);
  fitted.spec = spec;

  ResidualDiagnostics rd = residual_diagnostics(fitted, obs, cfg.diagnose_bins);

  Table cov;
  cov.meta = base_meta(ctx, "diagnose");
  cov.meta.emplace_back("bins", std::to_string(cfg.diagnose_bins));
  cov.meta.emplace_back("observation_count", std::to_string(obs.count()));
  cov.columns = {"distance", "covariance", "pair_count"};
  cov.rows.resize(rd.bin_center.size(), 3);
  cov.rows.col(0) = rd.bin_center;
  cov.rows.col(1) = rd.bin_covariance;
  cov.rows.col(2) = rd.bin_count.cast<double>();
  save_table(cov, out_path(ctx, "residual_covariance.tsv"));

  Table nodes;
  nodes.meta = base_meta(ctx, "diagnose");
  nodes.meta.emplace_back("observation_count", std::to_string(obs.count()));
  nodes.columns = location_columns(mesh.manifold);
  for (const char* c : {"mean", "sd", "count"}) nodes.columns.push_back(c);
  nodes.rows.resize(mesh.numVertices(), 5);
  nodes.rows.leftCols(2) = display_coords(mesh.vertices, mesh.manifold);
  nodes.rows.col(2) = rd.node_mean;
  nodes.rows.col(3) = rd.node_sd;
  nodes.rows.col(4) = rd.node_count.cast<double>();
  save_table(nodes, out_path(ctx, "node_residuals.tsv"));
}

}  // namespace nspde
