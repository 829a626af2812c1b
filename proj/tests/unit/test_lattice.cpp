#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "metafo/errors.hpp"
#include "metafo/lattice.hpp"
#include "metafo/materials.hpp"
#include "metafo/surrogate.hpp"

using namespace metafo;
using namespace metafo::lattice;

namespace {

constexpr std::size_t kSimpleCubic = 6;
constexpr std::size_t kBcc = 1;

Mask bit(std::size_t i) { return Mask{1} << i; }

std::set<Edge> edge_set(const UnitCell& c) { return {c.edges().begin(), c.edges().end()}; }

}  // namespace

TEST_SUITE("lattice") {
  TEST_CASE("library shape") {
    const auto& lib = basis_library();
    CHECK(lib.size() == 10);
    CHECK(lib[kSimpleCubic].name == "Simple Cubic");
    CHECK(lib[kSimpleCubic].cell.edges().size() == 12);
    for (const auto& b : lib) CHECK(b.cell.edges().size() > 0);
  }

  TEST_CASE("basis edge sets are pairwise disjoint") {
    const auto& lib = basis_library();
    for (std::size_t i = 0; i < lib.size(); ++i) {
      for (std::size_t j = i + 1; j < lib.size(); ++j) {
        const auto a = edge_set(lib[i].cell);
        for (const auto& e : lib[j].cell.edges()) CHECK(a.count(e) == 0);
      }
    }
  }

  TEST_CASE("combine is a set union") {
    const auto& lib = basis_library();
    for (std::size_t i = 0; i < lib.size(); ++i) {
      CHECK(combine(bit(i)).edges().size() == lib[i].cell.edges().size());
      CHECK(edge_set(combine(bit(i))) == edge_set(lib[i].cell));
    }
    const Mask m = bit(2) | bit(5);
    CHECK(combine(m) == combine(m | m));
    CHECK(combine(m).edges().size() ==
          lib[2].cell.edges().size() + lib[5].cell.edges().size());
    CHECK(combine(m).basis_mask() == m);
    CHECK_THROWS_AS(combine(0), ContractError);
    CHECK_THROWS_AS(combine(bit(10)), ContractError);
  }

  TEST_CASE("adjacency of a union adds entrywise") {
    for (std::size_t i = 0; i < kBasisCount; ++i) {
      for (std::size_t j = i + 1; j < kBasisCount; ++j) {
        const auto ai = adjacency(combine(bit(i)));
        const auto aj = adjacency(combine(bit(j)));
        const auto aij = adjacency(combine(bit(i) | bit(j)));
        for (std::size_t q = 0; q < aij.size(); ++q) CHECK(ai[q] + aj[q] == aij[q]);
      }
    }
  }

  TEST_CASE("enumeration counts") {
    const auto all = enumerate_combinations();
    CHECK(all.size() == 1023);
    for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i].basis_mask() == i + 1);
    std::size_t four = 0;
    for (const auto& c : all) four += combination_order(c.basis_mask()) == 4;
    CHECK(four == 210);
    CHECK(enumerate_masks(bit(0) | bit(2) | bit(6) | bit(9)).size() == 15);
  }

  TEST_CASE("all 1023 edge sets are distinct, symmetric and well formed") {
    std::set<std::vector<Edge>> seen;
    for (const auto& c : enumerate_combinations()) {
      seen.emplace(c.edges().begin(), c.edges().end());
      CHECK(cubic_symmetry_check(c));
      const auto a = adjacency(c);
      const std::size_t n = a.rows();
      for (std::size_t i = 0; i < n; ++i) {
        CHECK(a(i, i) == 0.0);
        for (std::size_t j = 0; j < i; ++j) REQUIRE(a(i, j) == a(j, i));
      }
    }
    CHECK(seen.size() == 1023);
  }

  TEST_CASE("asymmetric extra edge breaks symmetry") {
    const auto sc = basis_library()[kSimpleCubic].cell;
    CHECK(cubic_symmetry_check(sc));
    auto edges = std::vector<Edge>(sc.edges().begin(), sc.edges().end());
    const auto pairs = candidate_pairs();
    for (const auto& e : pairs) {
      if (!edge_set(sc).count(e)) {
        edges.push_back(e);
        break;
      }
    }
    CHECK_FALSE(cubic_symmetry_check(UnitCell(bit(kSimpleCubic), edges)));
  }

  TEST_CASE("unit cell validation") {
    CHECK_THROWS_AS(UnitCell(1, {}), ContractError);
    CHECK_THROWS_AS(UnitCell(1, {Edge{0, 0}}), ContractError);
    CHECK_THROWS_AS(UnitCell(1, {Edge{0, 1}, Edge{0, 1}}), ContractError);
    CHECK_THROWS_AS(UnitCell(1, {Edge{0, node_count()}}), ContractError);
  }

  TEST_CASE("relative density formula and clamp") {
    CHECK(relative_density_from_length(1.0) == doctest::Approx(0.012).epsilon(1e-15));
    CHECK(relative_density_from_length(79.2) == 0.95);
    CHECK(relative_density_from_length(1000.0) == 0.95);
    // Simple Cubic frame: 12 struts of length 1.
    CHECK(std::abs(total_strut_length(basis_library()[kSimpleCubic].cell) - 12.0) < 1e-12);
    CHECK(std::abs(relative_density(basis_library()[kSimpleCubic].cell) - 0.144) < 1e-12);
  }

  TEST_CASE("density is monotone under union") {
    for (Mask m = 1; m <= kFullMask; ++m) {
      const double rho = relative_density(combine(m));
      CHECK(rho > 0.0);
      CHECK(rho <= 0.95);
      for (std::size_t i = 0; i < kBasisCount; ++i) {
        if (m & bit(i)) continue;
        REQUIRE(relative_density(combine(m | bit(i))) >= rho);
      }
    }
  }

  TEST_CASE("candidate pairs are the union of basis edges") {
    std::size_t total = 0;
    for (const auto& b : basis_library()) total += b.cell.edges().size();
    CHECK(candidate_pairs().size() == total);
    CHECK(edge_set(combine(kFullMask)).size() == total);
  }

  TEST_CASE("basis set parsing") {
    CHECK(parse_basis_set("all") == kFullMask);
    CHECK(parse_basis_set("0,2,6,9") == (bit(0) | bit(2) | bit(6) | bit(9)));
    CHECK(parse_basis_set("0x3") == 3u);
    CHECK(parse_basis_set("5") == bit(5));
    CHECK_THROWS(parse_basis_set("11"));
    CHECK_THROWS(parse_basis_set(""));
  }
}

TEST_SUITE("materials") {
  using namespace metafo::materials;

  TEST_CASE("yeoh stress hand values") {
    const Material m{0, 0.5, 0.0, 0.0, "m"};
    CHECK(yeoh_stress(m, 0.0) == 0.0);
    CHECK(yeoh_stress(Material{0, 0.9, 0.2, 0.5, "m"}, 0.0) == 0.0);
    // lambda = 0.8: 2 * 0.5 * (lambda^-2 - lambda) = 1.5625 - 0.8.
    CHECK(std::abs(yeoh_stress(m, 0.2) - 0.7625) < 1e-12);
    CHECK_THROWS_AS(yeoh_stress(m, 1.0), DomainError);
  }

  TEST_CASE("yeoh stress with higher-order terms") {
    // I1 = lambda^2 + 2 / lambda; dW/dI1 = c10 + 2 c20 (I1-3) + 3 c30 (I1-3)^2.
    const Material m{0, 0.3, 0.1, 0.2, "m"};
    const double lam = 0.7;
    const double i1 = lam * lam + 2.0 / lam;
    const double dw = 0.3 + 0.2 * (i1 - 3) + 0.6 * (i1 - 3) * (i1 - 3);
    CHECK(std::abs(yeoh_stress(m, 0.3) - 2.0 * dw * (1.0 / (lam * lam) - lam)) < 1e-12);
  }

  TEST_CASE("yeoh stress increases with compression") {
    for (int id = 0; id < 20; ++id) {
      const auto m = sample_material(7, id);
      double prev = 0.0;
      for (int i = 1; i < 90; ++i) {
        const double s = yeoh_stress(m, i * 0.01);
        REQUIRE(s > prev);
        prev = s;
      }
    }
  }

  TEST_CASE("sampling is deterministic, distinct and in range") {
    CHECK(sample_material(42, 3) == sample_material(42, 3));
    std::set<std::tuple<double, double, double>> triples;
    for (int id = 0; id < 10; ++id) {
      const auto m = sample_material(42, id);
      CHECK(m.id == id);
      CHECK_NOTHROW(validate(m));
      triples.emplace(m.c10, m.c20, m.c30);
    }
    CHECK(triples.size() == 10);
    CHECK_THROWS_AS(validate(Material{0, 0.01, 0, 0, "m"}), ContractError);
    CHECK_THROWS_AS(validate(Material{0, 0.5, -0.1, 0, "m"}), ContractError);
  }

  TEST_CASE("strain grid") {
    const StrainGrid g;
    const auto s = g.strains();
    CHECK(s.size() == 21);
    for (std::size_t t = 0; t < s.size(); ++t) CHECK(s[t] == doctest::Approx(0.025 * t));
    CHECK(s.front() == 0.0);
    CHECK(s.back() == 0.5);
    const auto c = material_curve(sample_material(1, 0), g);
    CHECK_NOTHROW(c.validate());
    CHECK(c.stresses[0] == 0.0);
  }
}

TEST_SUITE("surrogate") {
  using namespace metafo::surrogate;
  using metafo::materials::Material;

  TEST_CASE("stiffness exponent") {
    CHECK(stiffness_exponent(basis_library()[kSimpleCubic].cell) == 1.0);
    CHECK(stiffness_exponent(basis_library()[kBcc].cell) == 2.0);
    const auto mixed = combine(bit(kSimpleCubic) | bit(kBcc));
    std::size_t diag = 0;
    for (const auto& e : mixed.edges()) diag += !axis_aligned(e);
    CHECK(stiffness_exponent(mixed) ==
          doctest::Approx(1.0 + double(diag) / double(mixed.edges().size())));
  }

  TEST_CASE("densification strain") {
    CHECK(densification_strain_from_density(0.95) == 0.5);
    CHECK(densification_strain_from_density(1e-9) == doctest::Approx(0.8));
    CHECK(densification_strain_from_density(0.2) == doctest::Approx(0.64));
  }

  TEST_CASE("response hand value") {
    const Material m{0, 0.5, 0.0, 0.0, "m"};
    const CellGeometry geo{0.2, 1.0, 0.64};
    const double expect = 0.2 * 0.7625 * (1.0 + std::pow(0.3125, 6));
    CHECK(std::abs(response_stress(m, geo, 0.2) - expect) < 1e-12);
    CHECK(std::abs(expect - 0.15264) < 1e-5);
  }

  TEST_CASE("simulate is deterministic and tracks the material") {
    const materials::StrainGrid g;
    for (Mask mask : {Mask{1}, Mask{0x41}, kFullMask}) {
      const auto cell = combine(mask);
      const auto mat = materials::sample_material(3, 1);
      const auto a = simulate(mat, cell, g);
      CHECK(a == simulate(mat, cell, g));
      CHECK(a.stresses[0] == 0.0);
      for (std::size_t t = 1; t < a.size(); ++t) {
        CHECK(a.stresses[t] > a.stresses[t - 1]);
        CHECK(std::isfinite(a.stresses[t]));
      }
    }
  }

  TEST_CASE("surrogate constants validation") {
    SurrogateSpec s;
    CHECK_NOTHROW(s.validate());
    s.q = -1.0;
    CHECK_THROWS(s.validate());
  }
}
