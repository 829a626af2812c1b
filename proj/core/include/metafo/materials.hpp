#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace metafo::materials {

inline constexpr double kC10Min = 0.05;
inline constexpr double kC10Max = 1.0;
inline constexpr double kC20Max = 0.2;
inline constexpr double kC30Max = 0.5;

/// Yeoh hyperelastic coefficients (stress units).
struct Material {
  int id = 0;
  double c10 = 0.0;
  double c20 = 0.0;
  double c30 = 0.0;
  std::string name;

  bool operator==(const Material&) const = default;
};

/// Throws ContractError when a coefficient leaves its range.
void validate(const Material& mat);

/// Equally spaced strains eps_max * t / (points - 1), t = 0..points-1.
struct StrainGrid {
  std::size_t points = 21;
  double eps_max = 0.5;

  double strain(std::size_t t) const {
    return eps_max * static_cast<double>(t) / static_cast<double>(points - 1);
  }
  std::vector<double> strains() const;
  void validate() const;

  bool operator==(const StrainGrid&) const = default;
};

/// Discretized stress over a strain grid.
struct Curve {
  std::vector<double> strains;
  std::vector<double> stresses;

  std::size_t size() const noexcept { return strains.size(); }
  /// Equal lengths, strains strictly increasing from 0.
  void validate() const;

  bool operator==(const Curve&) const = default;
};

/// Compressive nominal stress (positive in compression) of an incompressible
/// Yeoh solid under uniaxial strain eps. Throws DomainError for eps >= 1.
double yeoh_stress(const Material& mat, double eps);

/// Coefficients drawn uniformly inside the valid ranges; a pure function of
/// (seed, id).
Material sample_material(std::uint64_t seed, int id);

Curve material_curve(const Material& mat, const StrainGrid& grid);

}  // namespace metafo::materials
