#include "metafo/inverse.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"

#include "layers.hpp"
#include "metafo/bundle.hpp"
#include "metafo/errors.hpp"
#include "metafo/training.hpp"

namespace metafo::inverse {

using nlohmann::json;

namespace {

std::string enc_prefix(std::size_t l) { return "enc.layer" + std::to_string(l); }
std::string dec_prefix(std::size_t l) { return "dec.layer" + std::to_string(l); }

std::size_t mlp_count(std::size_t in, std::size_t hidden, std::size_t out) {
  return in * hidden + hidden + hidden * out + out;
}

}  // namespace

InverseParams init_inverse_params(const model::ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  InverseParams ip{cfg, {}};
  auto& ps = ip.weights;
  Rng rng(derive_seed(seed, 0x1de5));
  const std::size_t w = cfg.width();
  layers::add_mlp(ps, "phi_domain", 3, cfg.hidden, cfg.d_inp, rng);
  layers::add_mlp(ps, "phi_sol", 1, cfg.hidden, cfg.d_inp, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    layers::add_encoder_layer(ps, enc_prefix(l), w, cfg.heads, cfg.hidden, rng);
  }
  layers::add_mlp(ps, "coord", 3, cfg.hidden, cfg.d_inp, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    layers::add_decoder_layer(ps, dec_prefix(l), w, cfg.heads, cfg.hidden, rng);
  }
  layers::add_mlp(ps, "edge", 3 * w, cfg.hidden, 1, rng);
  return ip;
}

std::size_t expected_inverse_parameter_count(const model::ModelConfig& cfg) {
  const std::size_t d = cfg.d_inp;
  const std::size_t w = cfg.width();
  const std::size_t h = cfg.hidden;
  const std::size_t attn = 4 * w * w;
  const std::size_t ffn = mlp_count(w, h, w);
  const std::size_t enc = attn + 4 * w + ffn;
  const std::size_t dec = 2 * attn + 6 * w + ffn;
  return mlp_count(3, h, d) + mlp_count(1, h, d) + cfg.layers * (enc + dec) +
         mlp_count(3, h, d) + mlp_count(3 * w, h, 1);
}

Tensor canonical_coordinates() {
  const auto nodes = lattice::canonical_nodes();
  Tensor out({nodes.size(), 3}, 0.0);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto p = nodes[i].position();
    for (std::size_t c = 0; c < 3; ++c) out(i, c) = p[c];
  }
  return out;
}

namespace {

void check_targets(const model::ModelConfig& cfg, std::span<const dataset::CurvePair> targets) {
  if (targets.empty()) throw ContractError("inverse design needs at least one target pair");
  const auto& grid = targets.front().response.strains;
  if (grid.size() != cfg.grid_points) {
    throw DimensionError("target grid has " + std::to_string(grid.size()) +
                         " points, model expects " + std::to_string(cfg.grid_points));
  }
  for (const auto& p : targets) {
    p.material.validate();
    p.response.validate();
    if (p.material.strains != grid || p.response.strains != grid) {
      throw DimensionError("target pairs do not share one strain grid");
    }
  }
}

}  // namespace

Var edge_logits_graph(Tape& t, const InverseParams& params,
                      std::span<const dataset::CurvePair> targets, const Tensor& node_coords,
                      std::span<const lattice::Edge> pairs) {
  const auto& cfg = params.config;
  check_targets(cfg, targets);
  if (node_coords.rank() != 2 || node_coords.cols() != 3) {
    throw DimensionError("node coordinates must be n x 3, got " + to_string(node_coords.shape()));
  }
  if (pairs.empty()) throw ContractError("no node pairs to score");
  const auto& ps = params.weights;
  const std::size_t k = targets.size();
  const std::size_t t_count = cfg.grid_points;

  std::vector<materials::Curve> mats;
  Tensor solution({k * t_count, 1}, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    mats.push_back(targets[i].material);
    for (std::size_t s = 0; s < t_count; ++s) {
      solution[i * t_count + s] = targets[i].response.stresses[s];
    }
  }
  Var z_dom = layers::mlp(t, ps, "phi_domain",
                          t.constant(model::domain_tokens(mats, targets.front().response.strains)));
  Var z_sol = layers::mlp(t, ps, "phi_sol", t.constant(std::move(solution)));
  const Var zs[] = {z_dom, z_sol};
  Var memory = t.concat_cols(zs);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    memory = layers::encoder_layer(t, ps, enc_prefix(l), cfg.heads, memory);
  }
  Var context = t.mean_rows(t.block_mean_rows(z_sol, k));

  const std::size_t n = node_coords.rows();
  const Var parts[] = {layers::mlp(t, ps, "coord", t.constant(node_coords)),
                       t.tile_rows(context, n)};
  Var h = t.concat_cols(parts);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    h = layers::decoder_layer(t, ps, dec_prefix(l), cfg.heads, h, memory, 1);
  }
  std::vector<std::size_t> first, second;
  first.reserve(pairs.size());
  second.reserve(pairs.size());
  for (const auto& e : pairs) {
    if (e.a >= e.b || e.b >= n) throw ContractError("node pairs must satisfy i < j < n");
    first.push_back(e.a);
    second.push_back(e.b);
  }
  Var zi = t.gather_rows(h, std::move(first));
  Var zj = t.gather_rows(h, std::move(second));
  const Var feats[] = {zi, zj, t.mul(zi, zj)};
  return layers::mlp(t, ps, "edge", t.concat_cols(feats));
}

LikelihoodMatrix inverse_forward(const InverseParams& params,
                                 std::span<const dataset::CurvePair> targets,
                                 const Tensor& node_coords) {
  const std::size_t n = node_coords.rank() == 2 ? node_coords.rows() : 0;
  if (n < 2) throw DimensionError("inverse design needs at least two nodes");
  std::vector<lattice::Edge> pairs;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) pairs.push_back({i, j});
  }
  Tape tape(false);
  const Tensor& logits =
      tape.value(edge_logits_graph(tape, params, targets, node_coords, pairs));
  LikelihoodMatrix out{Tensor({n, n}, 0.0)};
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const double v = 1.0 / (1.0 + std::exp(-logits[p]));
    out.a(pairs[p].a, pairs[p].b) = v;
    out.a(pairs[p].b, pairs[p].a) = v;
  }
  return out;
}

Tensor threshold(const LikelihoodMatrix& a, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw ContractError("threshold tau must lie in (0, 1)");
  Tensor out(a.a.shape(), 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.a[i] > tau ? 1.0 : 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) out(i, i) = 0.0;
  return out;
}

double edge_bce_loss(const LikelihoodMatrix& a, const Tensor& truth,
                     std::span<const lattice::Edge> pairs) {
  if (truth.shape() != a.a.shape()) {
    throw DimensionError("truth " + to_string(truth.shape()) + " vs prediction " +
                         to_string(a.a.shape()));
  }
  if (pairs.empty()) throw ContractError("no pairs to score");
  const double lo = 1.0 / (1.0 + std::exp(30.0));
  const double hi = 1.0 / (1.0 + std::exp(-30.0));
  double s = 0.0;
  for (const auto& e : pairs) {
    const double p = std::clamp(a.a(e.a, e.b), lo, hi);
    const double y = truth(e.a, e.b);
    s -= y * std::log(p) + (1.0 - y) * std::log1p(-p);
  }
  return s / static_cast<double>(pairs.size());
}

void InverseTrainConfig::validate() const {
  model.validate();
  if (!(learning_rate > 0.0)) throw ContractError("learning rate must be positive");
  if (batch_size == 0 || steps == 0 || log_every == 0) {
    throw ContractError("batch_size, steps and log_every must be positive");
  }
  if (pairs_min == 0 || pairs_min > pairs_max) {
    throw ContractError("target pair range must satisfy 1 <= pairs_min <= pairs_max");
  }
  if (!(tau > 0.0 && tau < 1.0)) throw ContractError("tau must lie in (0, 1)");
}

std::string to_json(const InverseTrainConfig& cfg) {
  json j = {{"model", json::parse(model::to_json(cfg.model))},
            {"learning_rate", cfg.learning_rate},
            {"batch_size", cfg.batch_size},
            {"steps", cfg.steps},
            {"pairs_min", cfg.pairs_min},
            {"pairs_max", cfg.pairs_max},
            {"seed", cfg.seed},
            {"tau", cfg.tau},
            {"log_every", cfg.log_every},
            {"eval_samples", cfg.eval_samples}};
  return j.dump(2);
}

InverseTrainConfig inverse_config_from_json(const std::string& text) {
  InverseTrainConfig cfg;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw ContractError("inverse config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
      if (key == "model") cfg.model = model::model_config_from_json(v.dump());
      else if (key == "learning_rate") cfg.learning_rate = v.get<double>();
      else if (key == "batch_size") cfg.batch_size = v.get<std::size_t>();
      else if (key == "steps") cfg.steps = v.get<std::size_t>();
      else if (key == "pairs_min") cfg.pairs_min = v.get<std::size_t>();
      else if (key == "pairs_max") cfg.pairs_max = v.get<std::size_t>();
      else if (key == "seed") cfg.seed = v.get<std::uint64_t>();
      else if (key == "tau") cfg.tau = v.get<double>();
      else if (key == "log_every") cfg.log_every = v.get<std::size_t>();
      else if (key == "eval_samples") cfg.eval_samples = v.get<std::size_t>();
      else throw ContractError("unknown inverse config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ContractError(std::string("bad inverse config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

dataset::SplitSpec fold_split(const dataset::Dataset& ds, std::size_t folds, std::size_t fold,
                              std::uint64_t seed) {
  auto cells = ds.cell_masks();
  if (folds < 2 || fold >= folds || cells.size() < folds) {
    throw ContractError("fold " + std::to_string(fold) + " of " + std::to_string(folds) +
                        " is invalid for " + std::to_string(cells.size()) + " cells");
  }
  Rng rng(derive_seed(seed, 0xf01d));
  shuffle(cells, rng);
  dataset::SplitSpec s;
  s.seed = seed;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    (i * folds / cells.size() == fold ? s.test_cells : s.train_cells).push_back(cells[i]);
  }
  std::sort(s.train_cells.begin(), s.train_cells.end());
  std::sort(s.test_cells.begin(), s.test_cells.end());
  s.train_materials = ds.material_ids();
  std::sort(s.train_materials.begin(), s.train_materials.end());
  return s;
}

InverseCase score_prediction(const Tensor& predicted, const Tensor& truth,
                             std::span<const lattice::Edge> pairs) {
  if (predicted.shape() != truth.shape()) {
    throw DimensionError("prediction " + to_string(predicted.shape()) + " vs truth " +
                         to_string(truth.shape()));
  }
  InverseCase c;
  for (const auto& e : pairs) {
    const bool p = predicted(e.a, e.b) > 0.5;
    const bool y = truth(e.a, e.b) > 0.5;
    if (p && y) ++c.true_positives;
    if (p && !y) ++c.false_positives;
    if (!p && y) ++c.false_negatives;
  }
  c.exact = c.false_positives == 0 && c.false_negatives == 0;
  return c;
}

InverseEvalReport summarize(std::vector<InverseCase> cases, double tau) {
  InverseEvalReport r;
  r.tau = tau;
  std::size_t tp = 0, fp = 0, fn = 0, exact = 0;
  std::set<lattice::Mask> cells;
  for (const auto& c : cases) {
    tp += c.true_positives;
    fp += c.false_positives;
    fn += c.false_negatives;
    exact += c.exact ? 1 : 0;
    cells.insert(c.cell_mask);
  }
  r.edge_precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  r.edge_recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  r.edge_f1 = r.edge_precision + r.edge_recall > 0.0
                  ? 2.0 * r.edge_precision * r.edge_recall / (r.edge_precision + r.edge_recall)
                  : 0.0;
  r.n_evaluations = cases.size();
  r.exact_match_rate =
      cases.empty() ? 0.0 : static_cast<double>(exact) / static_cast<double>(cases.size());
  r.n_cells = cells.size();
  r.cases = std::move(cases);
  return r;
}

namespace {

std::vector<int> sample_materials(std::span<const int> pool, std::size_t lo, std::size_t hi,
                                  Rng& rng) {
  const std::size_t top = std::min(hi, pool.size());
  const std::size_t bottom = std::min(lo, top);
  const auto m = static_cast<std::size_t>(uniform_int(rng, bottom, top));
  std::vector<int> ids(pool.begin(), pool.end());
  for (std::size_t i = 0; i < m; ++i) {
    std::swap(ids[i], ids[static_cast<std::size_t>(uniform_int(rng, i, ids.size() - 1))]);
  }
  ids.resize(m);
  return ids;
}

std::vector<dataset::CurvePair> target_pairs(const dataset::Dataset& ds, lattice::Mask cell,
                                             std::span<const int> ids) {
  std::vector<dataset::CurvePair> out;
  for (int id : ids) {
    const auto& r = ds.record(cell, id);
    out.push_back({{r.strains, r.material_stresses}, {r.strains, r.unit_stresses}});
  }
  return out;
}

Tensor candidate_truth(lattice::Mask cell, std::span<const lattice::Edge> pairs) {
  const Tensor adj = lattice::adjacency(lattice::combine(cell));
  Tensor out({pairs.size(), 1}, 0.0);
  for (std::size_t p = 0; p < pairs.size(); ++p) out[p] = adj(pairs[p].a, pairs[p].b);
  return out;
}

}  // namespace

InverseEvalReport inverse_evaluate(const InverseParams& params, const dataset::Dataset& ds,
                                   std::span<const lattice::Mask> cells, std::size_t samples,
                                   std::size_t pairs_min, std::size_t pairs_max, double tau,
                                   std::uint64_t seed) {
  const auto pool = ds.material_ids();
  const auto candidates = lattice::candidate_pairs();
  const Tensor coords = canonical_coordinates();
  Rng rng(derive_seed(seed, 0xe7a1));
  std::vector<InverseCase> cases;
  for (lattice::Mask cell : cells) {
    const Tensor truth = lattice::adjacency(lattice::combine(cell));
    for (std::size_t s = 0; s < samples; ++s) {
      auto ids = sample_materials(pool, pairs_min, pairs_max, rng);
      const auto targets = target_pairs(ds, cell, ids);
      const Tensor predicted = threshold(inverse_forward(params, targets, coords), tau);
      InverseCase c = score_prediction(predicted, truth, candidates);
      c.cell_mask = cell;
      c.material_ids = std::move(ids);
      cases.push_back(std::move(c));
    }
  }
  return summarize(std::move(cases), tau);
}

std::string to_json(const InverseEvalReport& r) {
  json cases = json::array();
  for (const auto& c : r.cases) {
    cases.push_back({{"cell_mask", c.cell_mask},
                     {"material_ids", c.material_ids},
                     {"true_positives", c.true_positives},
                     {"false_positives", c.false_positives},
                     {"false_negatives", c.false_negatives},
                     {"exact", c.exact}});
  }
  json j = {{"edge_precision", r.edge_precision},
            {"edge_recall", r.edge_recall},
            {"edge_f1", r.edge_f1},
            {"exact_match_rate", r.exact_match_rate},
            {"n_cells", r.n_cells},
            {"n_evaluations", r.n_evaluations},
            {"tau", r.tau},
            {"cases", cases}};
  return j.dump(2);
}

void save_inverse_checkpoint(const InverseParams& params, double stress_scale,
                             const std::filesystem::path& path) {
  Bundle b;
  b.kind = kInverseCheckpointKind;
  json meta;
  meta["config"] = json::parse(model::to_json(params.config));
  meta["stress_scale"] = stress_scale;
  b.metadata = meta.dump();
  for (const auto& leaf : params.weights) b.tensors.emplace_back(leaf.name, leaf.value);
  write_bundle(path, b);
}

InverseCheckpoint load_inverse_checkpoint(const std::filesystem::path& path) {
  Bundle b = read_bundle(path);
  if (b.kind != kInverseCheckpointKind) {
    throw FormatError("expected an inverse checkpoint, found '" + b.kind + "'");
  }
  InverseCheckpoint ck;
  try {
    const json meta = json::parse(b.metadata);
    ck.params = init_inverse_params(model::model_config_from_json(meta.at("config").dump()), 0);
    ck.stress_scale = meta.at("stress_scale").get<double>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed inverse checkpoint: ") + e.what());
  } catch (const ContractError& e) {
    throw FormatError(std::string("malformed inverse checkpoint: ") + e.what());
  }
  model::assign_weights(ck.params.weights, b.tensors);
  return ck;
}

InverseTrainResult inverse_train(const InverseTrainConfig& cfg, const dataset::Dataset& ds,
                                 const dataset::SplitSpec& split,
                                 const std::filesystem::path& out_dir,
                                 const InverseProgressFn& progress) {
  cfg.validate();
  if (!ds.normalized()) throw ContractError("inverse training requires a normalized dataset");
  if (split.train_cells.empty()) throw ContractError("no train cells");
  if (split.train_materials.empty()) throw ContractError("no train materials");
  std::filesystem::create_directories(out_dir);

  InverseTrainResult result;
  result.params = init_inverse_params(cfg.model, cfg.seed);
  auto& weights = result.params.weights;
  const auto candidates = lattice::candidate_pairs();
  const Tensor coords = canonical_coordinates();
  std::map<lattice::Mask, Tensor> truths;
  for (lattice::Mask cell : split.train_cells) truths.emplace(cell, candidate_truth(cell, candidates));

  training::TrainConfig opt;
  opt.learning_rate = cfg.learning_rate;
  training::OptimizerState state;
  Rng rng(derive_seed(cfg.seed, 0x1b7a));
  const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    weights.zero_grad();
    double loss = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const lattice::Mask cell =
          split.train_cells[uniform_int(rng, 0, split.train_cells.size() - 1)];
      const auto ids = sample_materials(split.train_materials, cfg.pairs_min, cfg.pairs_max, rng);
      const auto targets = target_pairs(ds, cell, ids);
      Tape tape;
      Var logits = edge_logits_graph(tape, result.params, targets, coords, candidates);
      Var l = tape.bce_with_logits(logits, truths.at(cell));
      loss += tape.value(l)[0] * inv_b;
      tape.backward(tape.scale(l, inv_b));
      tape.accumulate_grads(weights);
    }
    if (!std::isfinite(loss) || !std::isfinite(weights.grad_norm())) {
      throw NonFiniteError("non-finite inverse training step " + std::to_string(step) +
                           " (loss " + std::to_string(loss) + ")");
    }
    training::optimizer_step(weights, state, opt);
    result.losses.push_back(loss);
    if (progress) progress(step, loss);
  }

  result.checkpoint = out_dir / "inverse.ckpt";
  save_inverse_checkpoint(result.params, ds.stress_scale(), result.checkpoint);
  std::vector<training::LogRow> rows;
  double window = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < result.losses.size(); ++i) {
    window += result.losses[i];
    ++count;
    if ((i + 1) % cfg.log_every == 0 || i + 1 == result.losses.size()) {
      rows.push_back({i + 1, window / static_cast<double>(count), 0.0});
      window = 0.0;
      count = 0;
    }
  }
  training::write_loss_csv(rows, out_dir / "loss.csv");
  if (!split.test_cells.empty()) {
    result.eval = inverse_evaluate(result.params, ds, split.test_cells, cfg.eval_samples,
                                   cfg.pairs_min, cfg.pairs_max, cfg.tau, cfg.seed);
    std::ofstream(out_dir / "eval.json") << to_json(result.eval) << '\n';
  }
  return result;
}

std::string graph_json(const Tensor& adjacency, double tau) {
  json nodes = json::array();
  for (const auto& p : lattice::canonical_nodes()) {
    const auto pos = p.position();
    nodes.push_back({pos[0], pos[1], pos[2]});
  }
  json edges = json::array();
  for (std::size_t i = 0; i < adjacency.rows(); ++i) {
    for (std::size_t j = i + 1; j < adjacency.cols(); ++j) {
      if (adjacency(i, j) > 0.5) edges.push_back({i, j});
    }
  }
  return json{{"nodes", nodes}, {"edges", edges}, {"tau", tau}}.dump(2);
}

}  // namespace metafo::inverse
