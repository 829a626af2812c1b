#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "metafo/tensor.hpp"

namespace metafo::lattice {

/// Bit i selects basis cell i. Zero is reserved.
using Mask = std::uint32_t;

inline constexpr std::size_t kBasisCount = 10;
inline constexpr Mask kFullMask = (1u << kBasisCount) - 1;
/// Strut-area proxy: relative density per unit of total strut length.
inline constexpr double kDensityCoefficient = 0.012;
inline constexpr double kMaxDensity = 0.95;
/// Grid pitch of the 5 x 5 x 5 control-node grid on the unit cube.
inline constexpr double kGridPitch = 0.25;

/// Grid node in quarter units, each coordinate in [0, 4].
struct GridPoint {
  int x = 0;
  int y = 0;
  int z = 0;

  auto operator<=>(const GridPoint&) const = default;
  std::array<double, 3> position() const {
    return {x * kGridPitch, y * kGridPitch, z * kGridPitch};
  }
};

/// Undirected edge between canonical node indices, stored with a < b.
struct Edge {
  std::size_t a = 0;
  std::size_t b = 0;

  auto operator<=>(const Edge&) const = default;
};

Edge make_edge(std::size_t i, std::size_t j);

/// The canonical node set: every node used by a basis cell, ordered by (z, y, x).
std::span<const GridPoint> canonical_nodes();
std::size_t node_count();

/// Graph on the canonical node set.
class UnitCell {
 public:
  /// Validates the edge list (non-empty, no self-loops, no duplicates, indices
  /// in range) and stores it sorted.
  UnitCell(Mask basis_mask, std::vector<Edge> edges);

  Mask basis_mask() const noexcept { return mask_; }
  std::span<const Edge> edges() const noexcept { return edges_; }
  std::span<const GridPoint> nodes() const noexcept { return canonical_nodes(); }
  std::size_t node_count() const noexcept { return canonical_nodes().size(); }

  bool operator==(const UnitCell&) const = default;

 private:
  Mask mask_;
  std::vector<Edge> edges_;
};

struct BasisCell {
  std::string name;
  /// True where the geometry is an artifact-defined substitute for a cell the
  /// source only shows pictorially.
  bool stand_in = false;
  UnitCell cell;
};

using BasisLibrary = std::array<BasisCell, kBasisCount>;

/// The hard-coded ten-cell library. Edge sets are pairwise disjoint and each
/// is closed under the 48 symmetries of the cube.
const BasisLibrary& basis_library();

/// Union of the selected basis edge sets. Throws ContractError for mask 0 or
/// bits beyond the library.
UnitCell combine(Mask mask);

/// Every non-empty sub-mask of `basis_subset` in ascending order.
std::vector<UnitCell> enumerate_combinations(Mask basis_subset = kFullMask);
std::vector<Mask> enumerate_masks(Mask basis_subset = kFullMask);

/// Number of basis cells in a mask.
int combination_order(Mask mask);

double edge_length(const Edge& e);
/// True when the edge is parallel to a coordinate axis.
bool axis_aligned(const Edge& e);
double total_strut_length(const UnitCell& cell);

/// min(0.95, 0.012 * total strut length), cell side 1.
double relative_density(const UnitCell& cell);
double relative_density_from_length(double total_length);

/// Symmetric 0/1 matrix over the canonical node set.
Tensor adjacency(const UnitCell& cell);

/// True iff the edge set is invariant under all 48 signed axis permutations
/// about the cube center.
bool cubic_symmetry_check(const UnitCell& cell);

/// Sorted union of every basis edge: the pairs inverse design decides over.
std::span<const Edge> candidate_pairs();

/// Parses "all", a decimal/hex mask ("0x3f"), or a comma list of basis indices
/// ("0,2,5") into a basis-subset mask.
Mask parse_basis_set(const std::string& text);

}  // namespace metafo::lattice
