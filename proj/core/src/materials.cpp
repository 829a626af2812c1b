#include "metafo/materials.hpp"

#include "metafo/errors.hpp"
#include "metafo/random.hpp"

namespace metafo::materials {

void validate(const Material& mat) {
  auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
  if (!in(mat.c10, kC10Min, kC10Max) || !in(mat.c20, 0.0, kC20Max) ||
      !in(mat.c30, 0.0, kC30Max)) {
    throw ContractError("material " + std::to_string(mat.id) +
                        " has Yeoh coefficients outside the supported ranges");
  }
}

std::vector<double> StrainGrid::strains() const {
  std::vector<double> out(points);
  for (std::size_t t = 0; t < points; ++t) out[t] = strain(t);
  return out;
}

void StrainGrid::validate() const {
  if (points < 2) throw ContractError("strain grid needs at least two points");
  if (!(eps_max > 0.0 && eps_max < 1.0)) throw ContractError("eps_max must lie in (0, 1)");
}

void Curve::validate() const {
  if (strains.size() != stresses.size()) throw DimensionError("curve arrays differ in length");
  if (strains.empty() || strains.front() != 0.0) {
    throw ContractError("curve strains must start at 0");
  }
  for (std::size_t t = 1; t < strains.size(); ++t) {
    if (!(strains[t] > strains[t - 1])) {
      throw ContractError("curve strains must be strictly increasing");
    }
  }
}

double yeoh_stress(const Material& mat, double eps) {
  if (!(eps < 1.0)) throw DomainError("yeoh_stress: strain must be below 1");
  const double stretch = 1.0 - eps;
  const double i1 = stretch * stretch + 2.0 / stretch;
  const double x = i1 - 3.0;
  const double dw = mat.c10 + 2.0 * mat.c20 * x + 3.0 * mat.c30 * x * x;
  return -2.0 * (stretch - 1.0 / (stretch * stretch)) * dw;
}

Material sample_material(std::uint64_t seed, int id) {
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(id)));
  Material m;
  m.id = id;
  m.c10 = uniform(rng, kC10Min, kC10Max);
  m.c20 = uniform(rng, 0.0, kC20Max);
  m.c30 = uniform(rng, 0.0, kC30Max);
  m.name = "Ex-" + std::to_string(id);
  return m;
}

Curve material_curve(const Material& mat, const StrainGrid& grid) {
  grid.validate();
  Curve c;
  c.strains = grid.strains();
  c.stresses.reserve(grid.points);
  for (double e : c.strains) c.stresses.push_back(yeoh_stress(mat, e));
  return c;
}

}  // namespace metafo::materials
