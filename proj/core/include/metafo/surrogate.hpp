#pragma once

#include <string>

#include "metafo/lattice.hpp"
#include "metafo/materials.hpp"

namespace metafo::surrogate {

/// Versioned constants of the analytic unit-cell response oracle that stands
/// in for finite-element compression runs.
struct SurrogateSpec {
  std::string version = "metasim-1";
  double c_scale = 1.0;
  /// Densification exponent.
  double q = 6.0;
  /// Strain coupling between cell and base material.
  double kappa = 1.0;
  double eps_d_floor = 0.5;
  double eps_d_prefactor = 0.8;

  void validate() const;
  bool operator==(const SurrogateSpec&) const = default;
};

/// Geometry summary the response depends on.
struct CellGeometry {
  double relative_density = 0.0;
  double stiffness_exponent = 1.0;
  double densification_strain = 0.5;
};

/// 1 + fraction of edges not parallel to a coordinate axis.
double stiffness_exponent(const lattice::UnitCell& cell);

/// max(floor, prefactor * (1 - relative density)).
double densification_strain(const lattice::UnitCell& cell, const SurrogateSpec& spec = {});
double densification_strain_from_density(double density, const SurrogateSpec& spec = {});

CellGeometry geometry(const lattice::UnitCell& cell, const SurrogateSpec& spec = {});

/// sigma_u(eps) = c * rho^p * yeoh(kappa * eps) * (1 + (eps / eps_d)^q).
double response_stress(const materials::Material& mat, const CellGeometry& geo, double eps,
                       const SurrogateSpec& spec = {});

materials::Curve simulate(const materials::Material& mat, const lattice::UnitCell& cell,
                          const materials::StrainGrid& grid, const SurrogateSpec& spec = {});
materials::Curve simulate(const materials::Material& mat, const CellGeometry& geo,
                          const materials::StrainGrid& grid, const SurrogateSpec& spec = {});

}  // namespace metafo::surrogate
