#include "metafo/surrogate.hpp"

#include <algorithm>
#include <cmath>

#include "metafo/errors.hpp"

namespace metafo::surrogate {

void SurrogateSpec::validate() const {
  if (!(c_scale > 0 && q > 0 && kappa > 0 && eps_d_floor > 0 && eps_d_prefactor > 0)) {
    throw ContractError("surrogate constants must be positive");
  }
}

double stiffness_exponent(const lattice::UnitCell& cell) {
  std::size_t diagonal = 0;
  for (const auto& e : cell.edges()) diagonal += lattice::axis_aligned(e) ? 0 : 1;
  return 1.0 + static_cast<double>(diagonal) / static_cast<double>(cell.edges().size());
}

double densification_strain_from_density(double density, const SurrogateSpec& spec) {
  return std::max(spec.eps_d_floor, spec.eps_d_prefactor * (1.0 - density));
}

double densification_strain(const lattice::UnitCell& cell, const SurrogateSpec& spec) {
  return densification_strain_from_density(lattice::relative_density(cell), spec);
}

CellGeometry geometry(const lattice::UnitCell& cell, const SurrogateSpec& spec) {
  CellGeometry g;
  g.relative_density = lattice::relative_density(cell);
  g.stiffness_exponent = stiffness_exponent(cell);
  g.densification_strain = densification_strain_from_density(g.relative_density, spec);
  return g;
}

double response_stress(const materials::Material& mat, const CellGeometry& geo, double eps,
                       const SurrogateSpec& spec) {
  const double base = materials::yeoh_stress(mat, spec.kappa * eps);
  const double stiffness = spec.c_scale * std::pow(geo.relative_density, geo.stiffness_exponent);
  const double densify = 1.0 + std::pow(eps / geo.densification_strain, spec.q);
  return stiffness * base * densify;
}

materials::Curve simulate(const materials::Material& mat, const CellGeometry& geo,
                          const materials::StrainGrid& grid, const SurrogateSpec& spec) {
  grid.validate();
  materials::Curve c;
  c.strains = grid.strains();
  c.stresses.reserve(grid.points);
  for (double e : c.strains) c.stresses.push_back(response_stress(mat, geo, e, spec));
  return c;
}

materials::Curve simulate(const materials::Material& mat, const lattice::UnitCell& cell,
                          const materials::StrainGrid& grid, const SurrogateSpec& spec) {
  return simulate(mat, geometry(cell, spec), grid, spec);
}

}  // namespace metafo::surrogate
