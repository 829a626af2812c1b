#pragma once

#include "json.hpp"

#include "metafo/lattice.hpp"
#include "metafo/materials.hpp"
#include "metafo/surrogate.hpp"

namespace metafo {

nlohmann::json to_json(const materials::StrainGrid& grid);
nlohmann::json to_json(const materials::Material& mat);
nlohmann::json to_json(const surrogate::SurrogateSpec& spec);
nlohmann::json to_json(const lattice::UnitCell& cell);
/// Canonical node coordinates and basis names.
nlohmann::json lattice_metadata();

materials::StrainGrid grid_from_json(const nlohmann::json& j);
materials::Material material_from_json(const nlohmann::json& j);
surrogate::SurrogateSpec surrogate_from_json(const nlohmann::json& j);

}  // namespace metafo
