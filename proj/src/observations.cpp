#include "nestedspde/observations.hpp"

#include <cmath>

#include "nestedspde/table_io.hpp"

namespace nspde {

namespace {

constexpr double kPi = 3.14159265358979323846;

void require_columns(const Table& table, const std::string& path,
                     std::initializer_list<const char*> names) {
  std::size_t i = 0;
  bool ok = table.columns.size() == names.size();
  for (const char* name : names)
    if (ok && table.columns[i++] != name) ok = false;
  if (!ok) {
    std::string want;
    for (const char* name : names) {
      if (!want.empty()) want += ", ";
      want += name;
    }
    std::string got;
    for (const auto& c : table.columns) {
      if (!got.empty()) got += ", ";
      got += c;
    }
    throw DataError(path + ": expected columns (" + want + "), found (" + got +
                    ")");
  }
}

}  // namespace

void ObservationSet::validate(const TriangularMesh& mesh) const {
  if (locations.rows() != values.size())
    throw DataError("observation count mismatch: " +
                    std::to_string(locations.rows()) + " locations, " +
                    std::to_string(values.size()) + " values");
  if (count() > 0 && locations.cols() != mesh.dim())
    throw DataError("observation locations have " +
                    std::to_string(locations.cols()) +
                    " coordinates, mesh expects " + std::to_string(mesh.dim()));
  if (!locations.allFinite() || !values.allFinite())
    throw DataError("observations contain non-finite entries");
  if (mesh.manifold == Manifold::Sphere) {
    for (Index i = 0; i < locations.rows(); ++i) {
      double n = locations.row(i).norm();
      if (std::abs(n - 1.0) > 1e-6)
        throw DataError("observation " + std::to_string(i) +
                        " is not on the unit sphere (norm " +
                        std::to_string(n) + ")");
    }
  }
}

ObservationSet load_observations(const std::string& path, Manifold manifold) {
  Table table = load_table(path);
  ObservationSet obs;
  Index n = table.rows.rows();
  obs.values.resize(n);
  if (manifold == Manifold::Plane) {
    require_columns(table, path, {"x", "y", "value"});
    obs.locations.resize(n, 2);
    obs.locations = table.rows.leftCols(2);
    obs.values = table.rows.col(2);
  } else {
    require_columns(table, path, {"lon_deg", "lat_deg", "value"});
    obs.locations.resize(n, 3);
    for (Index i = 0; i < n; ++i) {
      double lon = table.rows(i, 0);
      double lat = table.rows(i, 1);
      if (lon < -180.0 || lon > 180.0)
        throw DataError(path + ": longitude " + std::to_string(lon) +
                        " outside [-180, 180] at row " + std::to_string(i + 1));
      if (lat < -90.0 || lat > 90.0)
        throw DataError(path + ": latitude " + std::to_string(lat) +
                        " outside [-90, 90] at row " + std::to_string(i + 1));
      double lam = lon * kPi / 180.0;
      double phi = lat * kPi / 180.0;
      obs.locations(i, 0) = std::cos(phi) * std::cos(lam);
      obs.locations(i, 1) = std::cos(phi) * std::sin(lam);
      obs.locations(i, 2) = std::sin(phi);
    }
    obs.values = table.rows.col(2);
  }
  if (!obs.locations.allFinite() || !obs.values.allFinite())
    throw DataError(path + ": observations contain non-finite entries");
  return obs;
}

void save_observations(
    const ObservationSet& obs, Manifold manifold, const std::string& path,
    const std::vector<std::pair<std::string, std::string>>& meta) {
  Table table;
  table.meta = meta;
  Index n = obs.count();
  table.rows.resize(n, 3);
  if (manifold == Manifold::Plane) {
    if (n > 0 && obs.locations.cols() != 2)
      throw ConfigError("planar observations need 2 coordinates");
    table.columns = {"x", "y", "value"};
    if (n > 0) table.rows.leftCols(2) = obs.locations;
  } else {
    if (n > 0 && obs.locations.cols() != 3)
      throw ConfigError("sphere observations need unit 3-vectors");
    table.columns = {"lon_deg", "lat_deg", "value"};
    for (Index i = 0; i < n; ++i) {
      double x = obs.locations(i, 0), y = obs.locations(i, 1),
             z = obs.locations(i, 2);
      table.rows(i, 0) = std::atan2(y, x) * 180.0 / kPi;
      table.rows(i, 1) = std::asin(std::min(1.0, std::max(-1.0, z))) * 180.0 / kPi;
    }
  }
  for (Index i = 0; i < n; ++i) table.rows(i, 2) = obs.values[i];
  save_table(table, path);
}

}  // namespace nspde
