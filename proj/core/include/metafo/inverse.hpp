#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "metafo/autodiff.hpp"
#include "metafo/dataset.hpp"
#include "metafo/model.hpp"
#include "metafo/random.hpp"

namespace metafo::inverse {

/// Separate weights from the forward model; same encoder family. Uses the
/// d_inp, heads, layers, hidden and grid_points fields of the model config.
struct InverseParams {
  model::ModelConfig config;
  ParamSet weights;
};

InverseParams init_inverse_params(const model::ModelConfig& cfg, std::uint64_t seed);
std::size_t expected_inverse_parameter_count(const model::ModelConfig& cfg);

/// n x n connection probabilities over the canonical node set; symmetric with
/// a zero diagonal.
struct LikelihoodMatrix {
  Tensor a;

  std::size_t size() const noexcept { return a.rows(); }
};

/// Canonical node positions as an n x 3 tensor.
Tensor canonical_coordinates();

/// Records the pair logits (one row per (i, j), i < j) on `tape`.
Var edge_logits_graph(Tape& tape, const InverseParams& params,
                      std::span<const dataset::CurvePair> targets, const Tensor& node_coords,
                      std::span<const lattice::Edge> pairs);

LikelihoodMatrix inverse_forward(const InverseParams& params,
                                 std::span<const dataset::CurvePair> targets,
                                 const Tensor& node_coords);

/// Entry (i, j) is 1 iff A(i, j) > tau. Throws ContractError unless 0 < tau < 1.
Tensor threshold(const LikelihoodMatrix& a, double tau = 0.5);

/// Mean binary cross-entropy over the given pairs, with probabilities held to
/// the sigmoid of [-30, 30].
double edge_bce_loss(const LikelihoodMatrix& a, const Tensor& truth,
                     std::span<const lattice::Edge> pairs);

struct InverseTrainConfig {
  model::ModelConfig model;
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t steps = 3000;
  std::size_t pairs_min = 1;
  std::size_t pairs_max = 3;
  std::uint64_t seed = 0;
  double tau = 0.5;
  std::size_t log_every = 100;
  /// Evaluations per held-out cell.
  std::size_t eval_samples = 10;

  void validate() const;
  bool operator==(const InverseTrainConfig&) const = default;
};

std::string to_json(const InverseTrainConfig& cfg);
InverseTrainConfig inverse_config_from_json(const std::string& text);

/// Cells partitioned into `folds` seeded groups; fold `fold` is held out.
/// Every material is available on both sides.
dataset::SplitSpec fold_split(const dataset::Dataset& ds, std::size_t folds, std::size_t fold,
                              std::uint64_t seed);

struct InverseCase {
  lattice::Mask cell_mask = 0;
  std::vector<int> material_ids;
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::size_t false_negatives = 0;
  bool exact = false;
};

struct InverseEvalReport {
  double edge_precision = 0.0;
  double edge_recall = 0.0;
  double edge_f1 = 0.0;
  double exact_match_rate = 0.0;
  std::size_t n_cells = 0;
  std::size_t n_evaluations = 0;
  double tau = 0.5;
  std::vector<InverseCase> cases;
};

/// Scores one prediction over the candidate pairs.
InverseCase score_prediction(const Tensor& predicted, const Tensor& truth,
                             std::span<const lattice::Edge> pairs);
/// Micro-averaged precision/recall/F1 and exact-match rate over cases.
InverseEvalReport summarize(std::vector<InverseCase> cases, double tau);

InverseEvalReport inverse_evaluate(const InverseParams& params, const dataset::Dataset& ds,
                                   std::span<const lattice::Mask> cells, std::size_t samples,
                                   std::size_t pairs_min, std::size_t pairs_max, double tau,
                                   std::uint64_t seed);

std::string to_json(const InverseEvalReport& report);

inline constexpr const char* kInverseCheckpointKind = "metafo-inverse";

void save_inverse_checkpoint(const InverseParams& params, double stress_scale,
                             const std::filesystem::path& path);
struct InverseCheckpoint {
  InverseParams params;
  double stress_scale = 1.0;
};
InverseCheckpoint load_inverse_checkpoint(const std::filesystem::path& path);

struct InverseTrainResult {
  InverseParams params;
  std::vector<double> losses;
  InverseEvalReport eval;
  std::filesystem::path checkpoint;
};

using InverseProgressFn = std::function<void(std::size_t step, double loss)>;

/// Trains on split.train_cells, evaluates on split.test_cells, writes
/// inverse.ckpt, loss.csv and eval.json into out_dir.
InverseTrainResult inverse_train(const InverseTrainConfig& cfg, const dataset::Dataset& ds,
                                 const dataset::SplitSpec& split,
                                 const std::filesystem::path& out_dir,
                                 const InverseProgressFn& progress = {});

/// Predicted graph as {nodes, edges, tau} JSON.
std::string graph_json(const Tensor& adjacency, double tau);

}  // namespace metafo::inverse
