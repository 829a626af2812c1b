#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "metafo/dataset.hpp"
#include "metafo/model.hpp"
#include "metafo/random.hpp"

namespace metafo::training {

enum class OptimizerKind { kAdam, kSgd };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& text);

struct TrainConfig {
  model::ModelConfig model;
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t steps = 20000;
  std::size_t k_min = 2;
  std::size_t k_max = 5;
  double noise_prob = 0.5;
  double noise_min = 0.0;
  double noise_max = 0.10;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Global gradient-norm clip; 0 disables clipping.
  double clip_norm = 0.0;
  std::size_t log_every = 100;
  /// Steps between checkpoint and state snapshots; 0 writes only the final one.
  std::size_t checkpoint_every = 0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

std::string to_json(const TrainConfig& cfg);
/// Keys absent from the text keep their defaults; "model" holds a nested
/// model config. Unknown keys are rejected.
TrainConfig train_config_from_json(const std::string& text);

/// Mean of squared differences over all entries.
double mse_loss(const Tensor& pred, const Tensor& target);

/// Multiplies every prompt stress (material and response) by (1 + level * g),
/// g ~ N(0, 1) drawn per value. Strains and query data are untouched.
dataset::PromptInstance inject_prompt_noise(const dataset::PromptInstance& prompt, double level,
                                            Rng& rng);

struct OptimizerState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t t = 0;
};

/// One update of every leaf from its accumulated gradient.
void optimizer_step(ParamSet& params, OptimizerState& state, const TrainConfig& cfg);

struct TrainState {
  model::ModelParams params;
  OptimizerState optimizer;
  std::size_t step = 0;
  Rng batch_rng;
  Rng dropout_rng;
  /// Per-step mean batch loss and gradient norm.
  std::vector<double> losses;
  std::vector<double> grad_norms;
};

/// Fresh state: parameters from init_params(cfg.model, cfg.seed).
TrainState init_state(const TrainConfig& cfg);
/// Fresh optimizer and RNG streams around existing parameters.
TrainState init_state(const TrainConfig& cfg, model::ModelParams params);

void save_state(const TrainState& state, const TrainConfig& cfg, double stress_scale,
                const std::filesystem::path& path);
TrainState load_state(const std::filesystem::path& path, TrainConfig* cfg = nullptr);

/// Mean MSE over the batch, backward, optimizer update, step + 1. Throws
/// NonFiniteError with a diagnostic when the loss or gradient is not finite.
double train_step(TrainState& state, std::span<const dataset::PromptInstance> batch,
                  const TrainConfig& cfg);

/// Samples one training batch from the train partition, advancing the batch
/// stream of `state`.
std::vector<dataset::PromptInstance> sample_batch(TrainState& state, const dataset::Dataset& ds,
                                                  const dataset::SplitSpec& split,
                                                  const TrainConfig& cfg);

struct LogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

/// One row per log_every steps (window-mean loss) plus the final step.
std::vector<LogRow> log_rows(const TrainState& state, std::size_t log_every);
void write_loss_csv(const std::vector<LogRow>& rows, const std::filesystem::path& path);

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path loss_csv;
  std::filesystem::path state;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

using ProgressFn = std::function<void(std::size_t step, double loss)>;

/// Runs cfg.steps steps from `state` (which may be resumed mid-run) and
/// writes model.ckpt, state.bin and loss.csv into out_dir.
TrainResult train(const TrainConfig& cfg, const dataset::Dataset& ds,
                  const dataset::SplitSpec& split, TrainState& state,
                  const std::filesystem::path& out_dir, const ProgressFn& progress = {});

/// Convenience wrapper starting from init_state(cfg).
TrainResult train(const TrainConfig& cfg, const dataset::Dataset& ds,
                  const dataset::SplitSpec& split, const std::filesystem::path& out_dir,
                  const ProgressFn& progress = {});

}  // namespace metafo::training
