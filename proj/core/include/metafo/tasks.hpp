#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "metafo/dataset.hpp"
#include "metafo/inverse.hpp"
#include "metafo/model.hpp"
#include "metafo/training.hpp"

namespace metafo::tasks {

/// 100 * ||pred - truth||_2 / ||truth||_2. Throws DomainError for a zero truth.
double relative_error(std::span<const double> pred, std::span<const double> truth);
/// Mean of 100 * |pred - truth| / |truth| over entries with nonzero truth.
double mean_absolute_percentage(std::span<const double> pred, std::span<const double> truth);

/// Predicts the query material curve itself.
std::vector<double> baseline_copy(const dataset::PromptInstance& prompt, std::size_t query = 0);
/// Predicts the mean of the prompt response curves.
std::vector<double> baseline_mean(const dataset::PromptInstance& prompt);

struct CaseRecord {
  std::string group;
  lattice::Mask cell_mask = 0;
  int material_id = -1;
  std::size_t k = 0;
  double noise = 0.0;
  std::uint64_t seed = 0;
  std::map<std::string, double> metrics;

  /// Sort key: group, cell, material, k, noise, seed.
  bool operator<(const CaseRecord& other) const;
};

struct Aggregate {
  std::size_t count = 0;
  double mean = 0.0;
  double median = 0.0;
  double p95 = 0.0;
};

Aggregate aggregate(std::vector<double> values);

struct TaskReport {
  int task = 0;
  /// Serialized JSON object echoing the protocol settings.
  std::string config = "{}";
  std::vector<CaseRecord> cases;
  /// Headline numbers, e.g. "unseen_material.error".
  std::map<std::string, double> summary;

  /// group -> metric -> order ("all" or "1".."10") -> aggregate, recomputed
  /// from the cases.
  std::map<std::string, std::map<std::string, std::map<std::string, Aggregate>>> aggregates() const;
};

std::string to_json(const TaskReport& report);
std::string to_csv(const TaskReport& report);
/// Writes report.json and cases.csv into dir.
void write_report(const TaskReport& report, const std::filesystem::path& dir);

/// Stress scale agreement between a checkpoint and a normalized dataset.
void check_compatible(const model::Checkpoint& ck, const dataset::Dataset& ds);

struct Task1Options {
  std::size_t k = 5;
  std::vector<std::size_t> k_sweep = {1, 2, 3, 4, 5};
  std::uint64_t seed = 0;
};

/// Unseen-material (train cells x test materials) and unseen-cell (test
/// cells x train materials) sweeps at k, plus the unseen-material k sweep.
TaskReport run_task1(const model::Checkpoint& ck, const dataset::Dataset& ds,
                     const dataset::SplitSpec& split, const Task1Options& opt = {});

enum class MaskMode { kInterp, kExtrap };
enum class MaskTarget { kMaterial, kResponse };

std::string to_string(MaskMode mode);
MaskMode parse_mask_mode(const std::string& text);

/// Grid indices withheld: 0.1 < eps <= 0.3 (interp) or eps > 0.3 (extrap).
std::vector<std::size_t> mask_indices(const materials::StrainGrid& grid, MaskMode mode);
/// Replaces the masked stresses by linear interpolation between the window
/// neighbours (interp) or by the last observed value (extrap).
void apply_mask(std::vector<double>& stresses, std::span<const std::size_t> masked,
                MaskMode mode);

struct Task2Options {
  MaskMode mode = MaskMode::kInterp;
  MaskTarget target = MaskTarget::kMaterial;
  std::size_t k = 5;
  std::uint64_t seed = 0;
};

/// Unseen-material queries with the query material curve (or the prompt
/// response curves) masked; errors split into masked and clean windows.
TaskReport run_task2(const model::Checkpoint& ck, const dataset::Dataset& ds,
                     const dataset::SplitSpec& split, const Task2Options& opt = {});

struct Task3Options {
  std::vector<double> noise_levels = {0.0, 0.03, 0.05, 0.10};
  std::vector<std::size_t> k_list = {3, 4, 5};
  std::size_t noise_seeds = 20;
  std::uint64_t seed = 0;
  /// Contamination retraining; skipped when the ratio list is empty.
  std::vector<double> contamination_ratios = {0.1, 0.2, 0.3};
  double contamination_level = 0.05;
  /// Fine-tuning budget as a fraction of train.steps.
  double finetune_fraction = 0.25;
  training::TrainConfig train;
  std::filesystem::path work_dir;
};

/// Multiplies both stress arrays of a seeded fraction of train-partition
/// records by (1 + level * g).
dataset::Dataset contaminate(const dataset::Dataset& ds, const dataset::SplitSpec& split,
                             double ratio, double level, std::uint64_t seed);

/// Prompt-noise sweep over noise x k x seeds, plus optional contaminated
/// fine-tuning runs compared with a clean fine-tuning control.
TaskReport run_task3(const model::Checkpoint& ck, const dataset::Dataset& ds,
                     const dataset::SplitSpec& split, const Task3Options& opt = {});

struct Task4Options {
  std::size_t samples = 10;
  std::size_t pairs_min = 1;
  std::size_t pairs_max = 3;
  double tau = 0.5;
  std::uint64_t seed = 0;
};

TaskReport run_task4(const inverse::InverseParams& params, const dataset::Dataset& ds,
                     std::span<const lattice::Mask> cells, const Task4Options& opt = {});

}  // namespace metafo::tasks
