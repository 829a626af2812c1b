#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "metafo/lattice.hpp"
#include "metafo/materials.hpp"
#include "metafo/random.hpp"
#include "metafo/surrogate.hpp"

namespace metafo::dataset {

using lattice::Mask;
using materials::Curve;

inline constexpr const char* kFormatVersion = "metafo-ds-1";

struct DatasetRecord {
  Mask cell_mask = 0;
  int material_id = 0;
  std::vector<double> strains;
  std::vector<double> material_stresses;
  std::vector<double> unit_stresses;

  bool operator==(const DatasetRecord&) const = default;
};

/// The (cell, material, response) corpus. Records are ordered by cell mask,
/// then material id.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<DatasetRecord> records, std::vector<materials::Material> materials,
          materials::StrainGrid grid, surrogate::SurrogateSpec spec, double stress_scale,
          bool normalized);

  std::span<const DatasetRecord> records() const noexcept { return records_; }
  std::span<const materials::Material> materials() const noexcept { return materials_; }
  const materials::StrainGrid& grid() const noexcept { return grid_; }
  const surrogate::SurrogateSpec& surrogate() const noexcept { return spec_; }
  double stress_scale() const noexcept { return stress_scale_; }
  bool normalized() const noexcept { return normalized_; }

  /// Distinct cell masks, ascending.
  std::vector<Mask> cell_masks() const;
  /// Material ids in stored order.
  std::vector<int> material_ids() const;

  const DatasetRecord& record(Mask cell, int material_id) const;
  bool contains(Mask cell, int material_id) const;
  Curve material_curve(int material_id) const;
  Curve response_curve(Mask cell, int material_id) const;

  bool operator==(const Dataset& other) const;

 private:
  void index();

  std::vector<DatasetRecord> records_;
  std::vector<materials::Material> materials_;
  materials::StrainGrid grid_;
  surrogate::SurrogateSpec spec_;
  double stress_scale_ = 1.0;
  bool normalized_ = false;
  std::map<std::pair<Mask, int>, std::size_t> index_;
};

/// One record per (cell, material), simulated with the surrogate.
Dataset build_dataset(std::span<const Mask> cells, std::span<const materials::Material> mats,
                      const materials::StrainGrid& grid,
                      const surrogate::SurrogateSpec& spec = {});

/// Divides every stress by the largest material stress. Throws ContractError
/// when already normalized.
Dataset normalize(const Dataset& ds);
/// Inverse of normalize.
Dataset denormalize(const Dataset& ds);

struct SplitSpec {
  std::vector<Mask> train_cells;
  std::vector<Mask> test_cells;
  std::vector<int> train_materials;
  std::vector<int> test_materials;
  std::uint64_t seed = 0;

  bool operator==(const SplitSpec&) const = default;
};

/// Seeded 80:20 partition of cells and materials, independently. The test
/// share is floor(0.2 * count).
SplitSpec split(const Dataset& ds, std::uint64_t seed);

std::string to_json(const SplitSpec& split);
SplitSpec split_from_json(const std::string& text);

struct CurvePair {
  Curve material;
  Curve response;

  bool operator==(const CurvePair&) const = default;
};

/// k known (material, response) pairs on one geometry plus n query materials.
struct PromptInstance {
  Mask cell_mask = 0;
  std::vector<CurvePair> pairs;
  std::vector<Curve> query_materials;
  /// Ground-truth responses for the queries; empty for pure inference.
  std::vector<Curve> query_targets;
  /// Provenance; may be empty for prompts built outside a dataset.
  std::vector<int> prompt_material_ids;
  std::vector<int> query_material_ids;

  std::size_t k() const noexcept { return pairs.size(); }
  std::size_t n() const noexcept { return query_materials.size(); }
  /// Non-empty pairs and queries, matching lengths, shared strain grid.
  void validate() const;

  bool operator==(const PromptInstance&) const = default;
};

enum class PromptMode { kTrain, kTest };

/// Prompt from explicit material ids. Targets are filled from the dataset.
PromptInstance assemble_prompt(const Dataset& ds, Mask cell, std::span<const int> prompt_ids,
                               std::span<const int> query_ids);

/// Samples k context materials and builds a prompt for the given queries.
///
/// Train mode: the cell and every material come from the train partition.
/// Test mode: context is always drawn from train materials; the cell and the
/// queries may come from either partition.
PromptInstance make_prompt(const Dataset& ds, const SplitSpec& split, Mask cell, std::size_t k,
                           std::span<const int> query_ids, PromptMode mode, Rng& rng);

/// JSON-Lines: a metadata line, then one record per line.
void save(const Dataset& ds, const std::filesystem::path& path);
/// Throws FormatError naming the first bad line.
Dataset load(const std::filesystem::path& path);

}  // namespace metafo::dataset
