#include "serialization.hpp"

namespace metafo {

using nlohmann::json;

json to_json(const materials::StrainGrid& grid) {
  return {{"points", grid.points}, {"eps_max", grid.eps_max}};
}

json to_json(const materials::Material& mat) {
  return {{"id", mat.id}, {"c10", mat.c10}, {"c20", mat.c20}, {"c30", mat.c30}, {"name", mat.name}};
}

json to_json(const surrogate::SurrogateSpec& spec) {
  return {{"version", spec.version},         {"c_scale", spec.c_scale},
          {"q", spec.q},                     {"kappa", spec.kappa},
          {"eps_d_floor", spec.eps_d_floor}, {"eps_d_prefactor", spec.eps_d_prefactor}};
}

json to_json(const lattice::UnitCell& cell) {
  json edges = json::array();
  for (const auto& e : cell.edges()) edges.push_back({e.a, e.b});
  return {{"mask", cell.basis_mask()}, {"node_count", cell.node_count()}, {"edges", edges}};
}

json lattice_metadata() {
  json nodes = json::array();
  for (const auto& p : lattice::canonical_nodes()) nodes.push_back({p.x, p.y, p.z});
  json basis = json::array();
  for (const auto& b : lattice::basis_library()) {
    basis.push_back({{"name", b.name}, {"stand_in", b.stand_in}});
  }
  return {{"grid_pitch", lattice::kGridPitch}, {"nodes", nodes}, {"basis", basis}};
}

materials::StrainGrid grid_from_json(const json& j) {
  materials::StrainGrid g;
  g.points = j.at("points").get<std::size_t>();
  g.eps_max = j.at("eps_max").get<double>();
  g.validate();
  return g;
}

materials::Material material_from_json(const json& j) {
  materials::Material m;
  m.id = j.at("id").get<int>();
  m.c10 = j.at("c10").get<double>();
  m.c20 = j.at("c20").get<double>();
  m.c30 = j.at("c30").get<double>();
  m.name = j.value("name", std::string{});
  return m;
}

surrogate::SurrogateSpec surrogate_from_json(const json& j) {
  surrogate::SurrogateSpec s;
  s.version = j.at("version").get<std::string>();
  s.c_scale = j.at("c_scale").get<double>();
  s.q = j.at("q").get<double>();
  s.kappa = j.at("kappa").get<double>();
  s.eps_d_floor = j.at("eps_d_floor").get<double>();
  s.eps_d_prefactor = j.at("eps_d_prefactor").get<double>();
  s.validate();
  return s;
}

}  // namespace metafo
