#include "metafo/lattice.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "metafo/errors.hpp"

namespace metafo::lattice {

namespace {

using Segment = std::pair<GridPoint, GridPoint>;

Segment ordered(GridPoint p, GridPoint q) { return p < q ? Segment{p, q} : Segment{q, p}; }

// Signed axis permutation about the cube center (2, 2, 2) in quarter units.
struct Symmetry {
  std::array<int, 3> perm;
  std::array<bool, 3> flip;

  GridPoint apply(const GridPoint& p) const {
    const std::array<int, 3> c{p.x, p.y, p.z};
    std::array<int, 3> out{};
    for (int i = 0; i < 3; ++i) {
      const int v = c[perm[i]];
      out[i] = flip[i] ? 4 - v : v;
    }
    return {out[0], out[1], out[2]};
  }
};

const std::vector<Symmetry>& cube_group() {
  static const std::vector<Symmetry> group = [] {
    std::vector<Symmetry> g;
    std::array<int, 3> perm{0, 1, 2};
    do {
      for (int bits = 0; bits < 8; ++bits) {
        g.push_back({perm, {(bits & 1) != 0, (bits & 2) != 0, (bits & 4) != 0}});
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return g;
  }();
  return group;
}

std::set<Segment> orbit(const Segment& seed) {
  std::set<Segment> out;
  for (const auto& s : cube_group()) out.insert(ordered(s.apply(seed.first), s.apply(seed.second)));
  return out;
}

struct BasisDefinition {
  const char* name;
  bool stand_in;
  std::vector<Segment> seeds;
};

// Each basis cell is the union of the cube-group orbits of its seed struts.
// Coordinates are quarter units. Per-family subset sums of total strut length
// are distinct and the grand total stays below the density clamp, so every
// mask yields a distinct relative density.
const std::vector<BasisDefinition>& definitions() {
  static const std::vector<BasisDefinition> defs = {
      // face-centre crosses: face centre to the four quarter points around it
      {"Cubic", false, {{{0, 1, 2}, {0, 2, 2}}}},
      // corner to body centre
      {"BCC", false, {{{0, 0, 0}, {2, 2, 2}}}},
      // corner-to-corner face diagonals
      {"AFCC", true, {{{0, 0, 0}, {0, 4, 4}}}},
      // diagonals of the inner squares on the three mid-planes
      {"Prismane", true, {{{1, 1, 2}, {3, 3, 2}}}},
      // short struts from each face centre toward the body centre
      {"Square Bifrustum", true, {{{0, 2, 2}, {1, 2, 2}}}},
      // tetrahedral bonds: sub-cube centres to corner and face-centre sites
      {"Diamond", false, {{{1, 1, 1}, {0, 0, 0}}, {{1, 1, 1}, {2, 2, 0}}}},
      // cube frame
      {"Simple Cubic", false, {{{0, 0, 0}, {4, 0, 0}}}},
      // edges between adjacent face centres
      {"Octahedron", false, {{{2, 2, 0}, {2, 0, 2}}}},
      // sub-cube centres to body centre
      {"Inner Star", true, {{{1, 1, 1}, {2, 2, 2}}}},
      // face centres to body centre
      {"Axial Cross", true, {{{2, 2, 0}, {2, 2, 2}}}},
  };
  return defs;
}

struct Library {
  std::vector<GridPoint> nodes;
  std::map<GridPoint, std::size_t> node_index;
  std::vector<std::vector<Edge>> basis_edges;
  std::vector<Edge> candidates;
};

const Library& library_data() {
  static const Library lib = [] {
    Library l;
    std::vector<std::set<Segment>> segments;
    std::set<GridPoint> points;
    for (const auto& def : definitions()) {
      std::set<Segment> cell;
      for (const auto& seed : def.seeds) {
        auto o = orbit(ordered(seed.first, seed.second));
        cell.insert(o.begin(), o.end());
      }
      for (const auto& [p, q] : cell) {
        points.insert(p);
        points.insert(q);
      }
      segments.push_back(std::move(cell));
    }
    l.nodes.assign(points.begin(), points.end());
    std::sort(l.nodes.begin(), l.nodes.end(), [](const GridPoint& a, const GridPoint& b) {
      return std::tie(a.z, a.y, a.x) < std::tie(b.z, b.y, b.x);
    });
    for (std::size_t i = 0; i < l.nodes.size(); ++i) l.node_index[l.nodes[i]] = i;
    for (const auto& cell : segments) {
      std::vector<Edge> edges;
      for (const auto& [p, q] : cell) edges.push_back(make_edge(l.node_index[p], l.node_index[q]));
      std::sort(edges.begin(), edges.end());
      l.candidates.insert(l.candidates.end(), edges.begin(), edges.end());
      l.basis_edges.push_back(std::move(edges));
    }
    std::sort(l.candidates.begin(), l.candidates.end());
    return l;
  }();
  return lib;
}

}  // namespace

Edge make_edge(std::size_t i, std::size_t j) { return i < j ? Edge{i, j} : Edge{j, i}; }

std::span<const GridPoint> canonical_nodes() { return library_data().nodes; }

std::size_t node_count() { return library_data().nodes.size(); }

UnitCell::UnitCell(Mask basis_mask, std::vector<Edge> edges)
    : mask_(basis_mask), edges_(std::move(edges)) {
  if (edges_.empty()) throw ContractError("unit cell must have at least one edge");
  const std::size_t n = canonical_nodes().size();
  for (auto& e : edges_) {
    if (e.a == e.b) throw ContractError("unit cell edge is a self-loop");
    if (e.a >= n || e.b >= n) throw ContractError("unit cell edge references unknown node");
    e = make_edge(e.a, e.b);
  }
  std::sort(edges_.begin(), edges_.end());
  if (std::adjacent_find(edges_.begin(), edges_.end()) != edges_.end()) {
    throw ContractError("unit cell has duplicate edges");
  }
}

const BasisLibrary& basis_library() {
  static const BasisLibrary lib = [] {
    const auto& data = library_data();
    const auto& defs = definitions();
    auto make = [&](std::size_t i) {
      return BasisCell{defs[i].name, defs[i].stand_in,
                       UnitCell(Mask{1} << i, data.basis_edges[i])};
    };
    return BasisLibrary{make(0), make(1), make(2), make(3), make(4),
                        make(5), make(6), make(7), make(8), make(9)};
  }();
  return lib;
}

UnitCell combine(Mask mask) {
  if (mask == 0) throw ContractError("cannot combine an empty basis mask");
  if (mask > kFullMask) throw ContractError("basis mask has bits beyond the library");
  const auto& data = library_data();
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < kBasisCount; ++i) {
    if (mask & (Mask{1} << i)) {
      edges.insert(edges.end(), data.basis_edges[i].begin(), data.basis_edges[i].end());
    }
  }
  std::sort(edges.begin(), edges.end());
  return UnitCell(mask, std::move(edges));
}

std::vector<Mask> enumerate_masks(Mask basis_subset) {
  if (basis_subset == 0 || basis_subset > kFullMask) {
    throw ContractError("basis subset must be a non-empty 10-bit mask");
  }
  std::vector<Mask> out;
  for (Mask m = 1; m <= kFullMask; ++m) {
    if ((m & ~basis_subset) == 0) out.push_back(m);
  }
  return out;
}

std::vector<UnitCell> enumerate_combinations(Mask basis_subset) {
  std::vector<UnitCell> out;
  for (Mask m : enumerate_masks(basis_subset)) out.push_back(combine(m));
  return out;
}

int combination_order(Mask mask) { return std::popcount(mask); }

double edge_length(const Edge& e) {
  const auto nodes = canonical_nodes();
  const auto p = nodes[e.a].position();
  const auto q = nodes[e.b].position();
  return std::sqrt((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) +
                   (p[2] - q[2]) * (p[2] - q[2]));
}

bool axis_aligned(const Edge& e) {
  const auto nodes = canonical_nodes();
  const GridPoint& p = nodes[e.a];
  const GridPoint& q = nodes[e.b];
  const int differing = (p.x != q.x) + (p.y != q.y) + (p.z != q.z);
  return differing == 1;
}

double total_strut_length(const UnitCell& cell) {
  double total = 0.0;
  for (const auto& e : cell.edges()) total += edge_length(e);
  return total;
}

double relative_density_from_length(double total_length) {
  return std::min(kMaxDensity, kDensityCoefficient * total_length);
}

double relative_density(const UnitCell& cell) {
  return relative_density_from_length(total_strut_length(cell));
}

Tensor adjacency(const UnitCell& cell) {
  const std::size_t n = cell.node_count();
  Tensor a({n, n});
  for (const auto& e : cell.edges()) {
    a(e.a, e.b) = 1.0;
    a(e.b, e.a) = 1.0;
  }
  return a;
}

bool cubic_symmetry_check(const UnitCell& cell) {
  const auto& data = library_data();
  std::set<Edge> edges(cell.edges().begin(), cell.edges().end());
  for (const auto& s : cube_group()) {
    for (const auto& e : cell.edges()) {
      auto p = data.node_index.find(s.apply(data.nodes[e.a]));
      auto q = data.node_index.find(s.apply(data.nodes[e.b]));
      if (p == data.node_index.end() || q == data.node_index.end()) return false;
      if (!edges.contains(make_edge(p->second, q->second))) return false;
    }
  }
  return true;
}

std::span<const Edge> candidate_pairs() { return library_data().candidates; }

Mask parse_basis_set(const std::string& text) {
  if (text == "all") return kFullMask;
  Mask mask = 0;
  try {
    if (text.find(',') == std::string::npos && text.rfind("0x", 0) == 0) {
      mask = static_cast<Mask>(std::stoul(text, nullptr, 16));
    } else {
      std::stringstream ss(text);
      std::string item;
      while (std::getline(ss, item, ',')) {
        const auto idx = std::stoul(item);
        if (idx >= kBasisCount) throw ContractError("basis index out of range: " + item);
        mask |= Mask{1} << idx;
      }
    }
  } catch (const std::logic_error&) {
    throw ContractError("cannot parse basis set '" + text + "'");
  }
  if (mask == 0 || mask > kFullMask) throw ContractError("basis set must select 1..10 cells");
  return mask;
}

}  // namespace metafo::lattice
