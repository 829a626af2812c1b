#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "metafo/autodiff.hpp"
#include "metafo/dataset.hpp"
#include "metafo/random.hpp"
#include "metafo/tensor.hpp"

namespace metafo::model {

struct ModelConfig {
  std::size_t d_inp = 64;
  std::size_t heads = 4;
  std::size_t layers = 3;
  std::size_t hidden = 128;
  /// Noise-bank size K.
  std::size_t noise_bank = 16;
  /// Grid points T per curve.
  std::size_t grid_points = 21;
  double dropout = 0.0;

  /// Token width 2 * d_inp.
  std::size_t width() const noexcept { return 2 * d_inp; }
  std::size_t head_dim() const noexcept { return width() / heads; }
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

std::string to_json(const ModelConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig model_config_from_json(const std::string& text);

/// Every trainable weight, in canonical order, plus the config that shaped it.
struct ModelParams {
  ModelConfig config;
  ParamSet weights;
};

/// Xavier-uniform matrices, zero biases, unit LayerNorm gains, noise bank
/// drawn from N(0, 0.02^2). A pure function of (cfg, seed).
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Closed-form scalar count of init_params(cfg).
std::size_t expected_parameter_count(const ModelConfig& cfg);

/// (eps_m, sigma_m, eps_u) rows, one per grid point, for each curve in turn.
Tensor domain_tokens(std::span<const materials::Curve> materials,
                     std::span<const double> response_strains);
Tensor prompt_domain_tokens(const dataset::PromptInstance& prompt);
/// Response stresses of the prompt pairs as a (k*T) x 1 column.
Tensor prompt_solution_tokens(const dataset::PromptInstance& prompt);
Tensor query_domain_tokens(const dataset::PromptInstance& prompt);

/// Graph handles for the stages of one forward pass.
struct ForwardVars {
  Var z_domain, z_sol, z, h_enc, c_global, w, n_dynamic, e_dec, h_dec, y;
};

/// Records the forward pass on `tape` and returns the n x T prediction. A
/// non-null dropout_rng enables dropout at cfg.dropout.
Var forward_graph(Tape& tape, const ModelParams& params, const dataset::PromptInstance& prompt,
                  Rng* dropout_rng = nullptr, ForwardVars* vars = nullptr);

struct EncodedPrompt {
  /// (k*T) x 2d_inp encoder memory.
  Tensor h_enc;
  /// T x d_inp mean solution embedding.
  Tensor c_global;
};

EncodedPrompt encode_prompt(const ModelParams& params, const dataset::PromptInstance& prompt);
/// (n*T) x d_inp context-dependent noise w * E_noise.
Tensor dynamic_noise(const ModelParams& params, const Tensor& c_global, std::size_t n);
/// n x T predictions from (n*T) x 3 query tokens.
Tensor decode(const ModelParams& params, const Tensor& query_tokens, const Tensor& h_enc,
              const Tensor& n_dynamic);
/// n x T predictions in normalized stress units.
Tensor forward(const ModelParams& params, const dataset::PromptInstance& prompt);

struct ForwardTrace {
  Tensor z_domain;   // k x T x d_inp
  Tensor z_sol;      // k x T x d_inp
  Tensor z;          // k x T x 2d_inp
  Tensor e_enc;      // (k*T) x 2d_inp
  Tensor h_enc;      // (k*T) x 2d_inp
  Tensor c_global;   // T x d_inp
  Tensor w;          // (n*T) x K
  Tensor n_dynamic;  // (n*T) x d_inp
  Tensor e_dec;      // (n*T) x 2d_inp
  Tensor h_dec;      // (n*T) x 2d_inp
  Tensor y;          // n x T
};

ForwardTrace trace(const ModelParams& params, const dataset::PromptInstance& prompt);

inline constexpr const char* kCheckpointKind = "metafo-forward";

struct Checkpoint {
  ModelParams params;
  /// Divide raw stresses by this before the forward pass; multiply outputs by it.
  double stress_scale = 1.0;
};

void save_checkpoint(const ModelParams& params, double stress_scale,
                     const std::filesystem::path& path);
/// Throws FormatError on a bad file or a weight layout that does not match
/// the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies values from `source` into same-named, same-shaped leaves of
/// `target`; throws FormatError when the layouts differ.
void assign_weights(ParamSet& target, std::span<const std::pair<std::string, Tensor>> source);

}  // namespace metafo::model
