#include "metafo/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include "json.hpp"

#include "metafo/bundle.hpp"
#include "metafo/errors.hpp"
#include "metafo/parallel.hpp"

namespace metafo::training {

using nlohmann::json;

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::kAdam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& text) {
  if (text == "adam") return OptimizerKind::kAdam;
  if (text == "sgd") return OptimizerKind::kSgd;
  throw ContractError("unknown optimizer '" + text + "' (expected adam or sgd)");
}

void TrainConfig::validate() const {
  model.validate();
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ContractError("learning rate must be positive");
  }
  if (batch_size == 0) throw ContractError("batch size must be positive");
  if (steps == 0) throw ContractError("steps must be positive");
  if (k_min == 0 || k_min > k_max) throw ContractError("k range must satisfy 1 <= k_min <= k_max");
  if (!(noise_prob >= 0.0 && noise_prob <= 1.0)) throw ContractError("noise_prob outside [0, 1]");
  if (!(noise_min >= 0.0 && noise_min <= noise_max && noise_max <= 1.0)) {
    throw ContractError("noise level range must lie in [0, 1]");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0)) {
    throw ContractError("bad adam constants");
  }
  if (!(clip_norm >= 0.0)) throw ContractError("clip_norm must be >= 0");
  if (log_every == 0) throw ContractError("log_every must be positive");
}

std::string to_json(const TrainConfig& cfg) {
  json j = {{"model", json::parse(model::to_json(cfg.model))},
            {"learning_rate", cfg.learning_rate},
            {"batch_size", cfg.batch_size},
            {"steps", cfg.steps},
            {"k_min", cfg.k_min},
            {"k_max", cfg.k_max},
            {"noise_prob", cfg.noise_prob},
            {"noise_min", cfg.noise_min},
            {"noise_max", cfg.noise_max},
            {"seed", cfg.seed},
            {"optimizer", to_string(cfg.optimizer)},
            {"beta1", cfg.beta1},
            {"beta2", cfg.beta2},
            {"adam_eps", cfg.adam_eps},
            {"clip_norm", cfg.clip_norm},
            {"log_every", cfg.log_every},
            {"checkpoint_every", cfg.checkpoint_every}};
  return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
  TrainConfig cfg;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw ContractError("train config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
      if (key == "model") cfg.model = model::model_config_from_json(v.dump());
      else if (key == "learning_rate") cfg.learning_rate = v.get<double>();
      else if (key == "batch_size") cfg.batch_size = v.get<std::size_t>();
      else if (key == "steps") cfg.steps = v.get<std::size_t>();
      else if (key == "k_min") cfg.k_min = v.get<std::size_t>();
      else if (key == "k_max") cfg.k_max = v.get<std::size_t>();
      else if (key == "noise_prob") cfg.noise_prob = v.get<double>();
      else if (key == "noise_min") cfg.noise_min = v.get<double>();
      else if (key == "noise_max") cfg.noise_max = v.get<double>();
      else if (key == "seed") cfg.seed = v.get<std::uint64_t>();
      else if (key == "optimizer") cfg.optimizer = parse_optimizer(v.get<std::string>());
      else if (key == "beta1") cfg.beta1 = v.get<double>();
      else if (key == "beta2") cfg.beta2 = v.get<double>();
      else if (key == "adam_eps") cfg.adam_eps = v.get<double>();
      else if (key == "clip_norm") cfg.clip_norm = v.get<double>();
      else if (key == "log_every") cfg.log_every = v.get<std::size_t>();
      else if (key == "checkpoint_every") cfg.checkpoint_every = v.get<std::size_t>();
      else throw ContractError("unknown train config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ContractError(std::string("bad train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

double mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse: " + metafo::to_string(pred.shape()) + " vs " +
                         metafo::to_string(target.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    s += d * d;
  }
  return s / static_cast<double>(pred.size());
}

dataset::PromptInstance inject_prompt_noise(const dataset::PromptInstance& prompt, double level,
                                            Rng& rng) {
  if (!(level >= 0.0)) throw ContractError("noise level must be >= 0");
  dataset::PromptInstance out = prompt;
  if (level == 0.0) return out;
  for (auto& pair : out.pairs) {
    for (auto& s : pair.material.stresses) s *= 1.0 + level * standard_normal(rng);
    for (auto& s : pair.response.stresses) s *= 1.0 + level * standard_normal(rng);
  }
  return out;
}

void optimizer_step(ParamSet& params, OptimizerState& state, const TrainConfig& cfg) {
  double clip = 1.0;
  if (cfg.clip_norm > 0.0) {
    const double norm = params.grad_norm();
    if (norm > cfg.clip_norm) clip = cfg.clip_norm / norm;
  }
  ++state.t;
  if (cfg.optimizer == OptimizerKind::kSgd) {
    for (auto& leaf : params) {
      for (std::size_t i = 0; i < leaf.value.size(); ++i) {
        leaf.value[i] -= cfg.learning_rate * clip * leaf.grad[i];
      }
    }
    return;
  }
  if (state.m.empty()) {
    for (const auto& leaf : params) {
      state.m.emplace_back(leaf.value.shape(), 0.0);
      state.v.emplace_back(leaf.value.shape(), 0.0);
    }
  }
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& leaf = params[p];
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < leaf.value.size(); ++i) {
      const double g = clip * leaf.grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double mh = m[i] / c1;
      const double vh = v[i] / c2;
      leaf.value[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.adam_eps);
    }
  }
}

TrainState init_state(const TrainConfig& cfg) {
  cfg.validate();
  return init_state(cfg, model::init_params(cfg.model, cfg.seed));
}

TrainState init_state(const TrainConfig& cfg, model::ModelParams params) {
  cfg.validate();
  if (!(params.config == cfg.model)) {
    throw ContractError("parameters do not match the configured model");
  }
  TrainState s;
  s.params = std::move(params);
  s.batch_rng = Rng(derive_seed(cfg.seed, 0xba7c));
  s.dropout_rng = Rng(derive_seed(cfg.seed, 0xd207));
  return s;
}

namespace {

constexpr const char* kStateKind = "metafo-train-state";

std::string diagnostic(const TrainState& state, const TrainConfig& cfg, double loss) {
  std::vector<std::pair<double, std::string>> norms;
  for (const auto& leaf : state.params.weights) {
    double s = 0.0;
    for (std::size_t i = 0; i < leaf.grad.size(); ++i) s += leaf.grad[i] * leaf.grad[i];
    norms.emplace_back(std::sqrt(s), leaf.name);
  }
  std::sort(norms.begin(), norms.end(), [](const auto& a, const auto& b) {
    return !(a.first <= b.first);  // non-finite first
  });
  std::ostringstream out;
  out << "non-finite training step " << state.step + 1 << " (lr " << cfg.learning_rate
      << ", loss " << loss << ", grad norm " << state.params.weights.grad_norm() << "); largest:";
  for (std::size_t i = 0; i < std::min<std::size_t>(5, norms.size()); ++i) {
    out << ' ' << norms[i].second << '=' << norms[i].first;
  }
  return out.str();
}

}  // namespace

double train_step(TrainState& state, std::span<const dataset::PromptInstance> batch,
                  const TrainConfig& cfg) {
  if (batch.empty()) throw ContractError("empty training batch");
  auto& weights = state.params.weights;
  weights.zero_grad();
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  // Dropout masks are drawn in prompt order so threading cannot change them.
  std::vector<Rng> dropout(batch.size());
  for (auto& r : dropout) r = Rng(state.dropout_rng());

  std::vector<std::unique_ptr<Tape>> tapes(batch.size());
  std::vector<double> losses(batch.size(), 0.0);
  auto per_prompt = [&](std::size_t i) {
    const auto& prompt = batch[i];
    auto tape = std::make_unique<Tape>();
    Rng* drop = state.params.config.dropout > 0.0 ? &dropout[i] : nullptr;
    Var y = model::forward_graph(*tape, state.params, prompt, drop);
    Tensor target({prompt.n(), prompt.query_targets.front().size()}, 0.0);
    for (std::size_t q = 0; q < prompt.n(); ++q) {
      const auto& s = prompt.query_targets[q].stresses;
      std::copy(s.begin(), s.end(), target.row(q).begin());
    }
    Var loss = tape->mse(y, target);
    losses[i] = tape->value(loss)[0];
    if (!std::isfinite(losses[i])) return;
    tape->backward(tape->scale(loss, inv_b));
    tapes[i] = std::move(tape);
  };
  try {
    parallel_for(batch.size(), per_prompt);
  } catch (const NonFiniteError& e) {
    throw NonFiniteError(diagnostic(state, cfg, std::nan("")) + "; " + e.what());
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (tapes[i]) tapes[i]->accumulate_grads(weights);
    tapes[i].reset();
    loss += losses[i] * inv_b;
  }
  const double norm = weights.grad_norm();
  if (!std::isfinite(loss) || !std::isfinite(norm)) {
    throw NonFiniteError(diagnostic(state, cfg, loss));
  }
  optimizer_step(weights, state.optimizer, cfg);
  ++state.step;
  state.losses.push_back(loss);
  state.grad_norms.push_back(norm);
  return loss;
}

std::vector<dataset::PromptInstance> sample_batch(TrainState& state, const dataset::Dataset& ds,
                                                  const dataset::SplitSpec& split,
                                                  const TrainConfig& cfg) {
  if (split.train_cells.empty()) throw ContractError("split has no train cells");
  const std::size_t pool = split.train_materials.size();
  if (pool < cfg.k_min + 1) {
    throw ContractError("need at least k_min + 1 = " + std::to_string(cfg.k_min + 1) +
                        " train materials, have " + std::to_string(pool));
  }
  const std::size_t k_hi = std::min(cfg.k_max, pool - 1);
  auto& rng = state.batch_rng;
  std::vector<dataset::PromptInstance> batch;
  batch.reserve(cfg.batch_size);
  for (std::size_t b = 0; b < cfg.batch_size; ++b) {
    const lattice::Mask cell = split.train_cells[uniform_int(rng, 0, split.train_cells.size() - 1)];
    const auto k = static_cast<std::size_t>(uniform_int(rng, cfg.k_min, k_hi));
    const int query = split.train_materials[uniform_int(rng, 0, pool - 1)];
    const int queries[] = {query};
    auto prompt =
        dataset::make_prompt(ds, split, cell, k, queries, dataset::PromptMode::kTrain, rng);
    if (cfg.noise_prob > 0.0 && uniform01(rng) < cfg.noise_prob) {
      prompt = inject_prompt_noise(prompt, uniform(rng, cfg.noise_min, cfg.noise_max), rng);
    }
    batch.push_back(std::move(prompt));
  }
  return batch;
}

std::vector<LogRow> log_rows(const TrainState& state, std::size_t log_every) {
  std::vector<LogRow> rows;
  double window = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < state.losses.size(); ++i) {
    window += state.losses[i];
    ++count;
    const std::size_t step = i + 1;
    if (step % log_every == 0 || step == state.losses.size()) {
      rows.push_back({step, window / static_cast<double>(count), state.grad_norms[i]});
      window = 0.0;
      count = 0;
    }
  }
  return rows;
}

void write_loss_csv(const std::vector<LogRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "step,loss,grad_norm\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", r.step, r.loss, r.grad_norm);
    out << buf;
  }
  if (!out) throw Error("failed writing " + path.string());
}

void save_state(const TrainState& state, const TrainConfig& cfg, double stress_scale,
                const std::filesystem::path& path) {
  Bundle b;
  b.kind = kStateKind;
  json meta;
  meta["train_config"] = json::parse(to_json(cfg));
  meta["stress_scale"] = stress_scale;
  meta["step"] = state.step;
  meta["optimizer_t"] = state.optimizer.t;
  meta["batch_rng"] = serialize_rng(state.batch_rng);
  meta["dropout_rng"] = serialize_rng(state.dropout_rng);
  meta["losses"] = state.losses;
  meta["grad_norms"] = state.grad_norms;
  meta["has_moments"] = !state.optimizer.m.empty();
  b.metadata = meta.dump();
  for (const auto& leaf : state.params.weights) b.tensors.emplace_back(leaf.name, leaf.value);
  for (std::size_t i = 0; i < state.optimizer.m.size(); ++i) {
    const auto& name = state.params.weights[i].name;
    b.tensors.emplace_back("adam.m/" + name, state.optimizer.m[i]);
    b.tensors.emplace_back("adam.v/" + name, state.optimizer.v[i]);
  }
  write_bundle(path, b);
}

TrainState load_state(const std::filesystem::path& path, TrainConfig* cfg_out) {
  Bundle b = read_bundle(path);
  if (b.kind != kStateKind) {
    throw FormatError("expected a training state file, found '" + b.kind + "'");
  }
  TrainState s;
  TrainConfig cfg;
  bool moments = false;
  try {
    const json meta = json::parse(b.metadata);
    cfg = train_config_from_json(meta.at("train_config").dump());
    s.step = meta.at("step").get<std::size_t>();
    s.optimizer.t = meta.at("optimizer_t").get<std::size_t>();
    s.batch_rng = deserialize_rng(meta.at("batch_rng").get<std::string>());
    s.dropout_rng = deserialize_rng(meta.at("dropout_rng").get<std::string>());
    s.losses = meta.at("losses").get<std::vector<double>>();
    s.grad_norms = meta.at("grad_norms").get<std::vector<double>>();
    moments = meta.at("has_moments").get<bool>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed training state: ") + e.what());
  } catch (const ContractError& e) {
    throw FormatError(std::string("malformed training state: ") + e.what());
  }
  if (s.losses.size() != s.step || s.grad_norms.size() != s.step) {
    throw FormatError("training state history does not match its step counter");
  }
  s.params = model::init_params(cfg.model, 0);
  const std::size_t n = s.params.weights.size();
  const std::size_t expected = moments ? 3 * n : n;
  if (b.tensors.size() != expected) {
    throw FormatError("training state holds " + std::to_string(b.tensors.size()) +
                      " tensors, expected " + std::to_string(expected));
  }
  model::assign_weights(s.params.weights, std::span(b.tensors).first(n));
  if (moments) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto& [mn, m] = b.tensors[n + 2 * i];
      const auto& [vn, v] = b.tensors[n + 2 * i + 1];
      const auto& name = s.params.weights[i].name;
      if (mn != "adam.m/" + name || vn != "adam.v/" + name ||
          m.shape() != s.params.weights[i].value.shape() || v.shape() != m.shape()) {
        throw FormatError("optimizer moments do not match parameter '" + name + "'");
      }
      s.optimizer.m.push_back(m);
      s.optimizer.v.push_back(v);
    }
  }
  if (cfg_out) *cfg_out = cfg;
  return s;
}

TrainResult train(const TrainConfig& cfg, const dataset::Dataset& ds,
                  const dataset::SplitSpec& split, TrainState& state,
                  const std::filesystem::path& out_dir, const ProgressFn& progress) {
  cfg.validate();
  if (!ds.normalized()) throw ContractError("training requires a normalized dataset");
  if (ds.grid().points != cfg.model.grid_points) {
    throw ContractError("dataset grid has " + std::to_string(ds.grid().points) +
                        " points, model expects " + std::to_string(cfg.model.grid_points));
  }
  std::filesystem::create_directories(out_dir);
  TrainResult result;
  result.checkpoint = out_dir / "model.ckpt";
  result.loss_csv = out_dir / "loss.csv";
  result.state = out_dir / "state.bin";
  while (state.step < cfg.steps) {
    const auto batch = sample_batch(state, ds, split, cfg);
    const double loss = train_step(state, batch, cfg);
    if (progress) progress(state.step, loss);
    if (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 &&
        state.step < cfg.steps) {
      model::save_checkpoint(state.params, ds.stress_scale(),
                             out_dir / ("model_step" + std::to_string(state.step) + ".ckpt"));
      save_state(state, cfg, ds.stress_scale(), result.state);
      write_loss_csv(log_rows(state, cfg.log_every), result.loss_csv);
    }
  }
  model::save_checkpoint(state.params, ds.stress_scale(), result.checkpoint);
  save_state(state, cfg, ds.stress_scale(), result.state);
  write_loss_csv(log_rows(state, cfg.log_every), result.loss_csv);
  if (!state.losses.empty()) {
    result.initial_loss = state.losses.front();
    result.final_loss = state.losses.back();
  }
  return result;
}

TrainResult train(const TrainConfig& cfg, const dataset::Dataset& ds,
                  const dataset::SplitSpec& split, const std::filesystem::path& out_dir,
                  const ProgressFn& progress) {
  TrainState state = init_state(cfg);
  return train(cfg, ds, split, state, out_dir, progress);
}

}  // namespace metafo::training
