#pragma once

#include <string>
#include <utility>
#include <vector>

#include "nestedspde/mesh.hpp"
#include "nestedspde/types.hpp"

namespace nspde {

// Point observations of the field: locations on the modeled manifold (planar
// x,y or unit 3-vectors) and one value per location.
struct ObservationSet {
  Mat locations;
  Vec values;

  Index count() const { return values.size(); }

  // Shape consistency, finite values, and coordinate dimension against the
  // mesh. Location containment is checked where basis evaluation happens.
  void validate(const TriangularMesh& mesh) const;
};

// Tab-separated observation file. Planar columns: x, y, value. Sphere
// columns: lon_deg, lat_deg, value (converted to unit vectors on load).
// Optional meta pairs become "# key: value" header lines.
ObservationSet load_observations(const std::string& path, Manifold manifold);
void save_observations(
    const ObservationSet& obs, Manifold manifold, const std::string& path,
    const std::vector<std::pair<std::string, std::string>>& meta = {});

}  // namespace nspde
