#include "metafo/model.hpp"

#include <cmath>

#include "json.hpp"

#include "layers.hpp"
#include "metafo/bundle.hpp"
#include "metafo/errors.hpp"

namespace metafo::model {

using nlohmann::json;

void ModelConfig::validate() const {
  if (d_inp == 0 || heads == 0 || layers == 0 || hidden == 0 || noise_bank == 0) {
    throw ContractError("model config sizes must be positive");
  }
  if (grid_points < 2) throw ContractError("model config needs at least 2 grid points");
  if (width() % heads != 0) {
    throw ContractError("2*d_inp = " + std::to_string(width()) + " not divisible by H = " +
                        std::to_string(heads));
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("dropout must be in [0, 1)");
}

std::string to_json(const ModelConfig& cfg) {
  json j = {{"d_inp", cfg.d_inp},     {"heads", cfg.heads},
            {"layers", cfg.layers},   {"hidden", cfg.hidden},
            {"noise_bank", cfg.noise_bank}, {"grid_points", cfg.grid_points},
            {"dropout", cfg.dropout}};
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  ModelConfig cfg;
  try {
    const json j = json::parse(text);
    for (const auto& [key, value] : j.items()) {
      if (key == "d_inp") cfg.d_inp = value.get<std::size_t>();
      else if (key == "heads") cfg.heads = value.get<std::size_t>();
      else if (key == "layers") cfg.layers = value.get<std::size_t>();
      else if (key == "hidden") cfg.hidden = value.get<std::size_t>();
      else if (key == "noise_bank") cfg.noise_bank = value.get<std::size_t>();
      else if (key == "grid_points") cfg.grid_points = value.get<std::size_t>();
      else if (key == "dropout") cfg.dropout = value.get<double>();
      else throw ContractError("unknown model config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ContractError(std::string("bad model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

namespace {

std::string enc_prefix(std::size_t l) { return "enc.layer" + std::to_string(l); }
std::string dec_prefix(std::size_t l) { return "dec.layer" + std::to_string(l); }

std::size_t mlp_count(std::size_t in, std::size_t hidden, std::size_t out) {
  return in * hidden + hidden + hidden * out + out;
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams mp{cfg, {}};
  auto& ps = mp.weights;
  Rng rng(derive_seed(seed, 0x1417));
  const std::size_t d = cfg.d_inp;
  const std::size_t w = cfg.width();
  layers::add_mlp(ps, "phi_domain", 3, cfg.hidden, d, rng);
  layers::add_mlp(ps, "phi_sol", 1, cfg.hidden, d, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    layers::add_encoder_layer(ps, enc_prefix(l), w, cfg.heads, cfg.hidden, rng);
  }
  layers::add_mlp(ps, "psi", d, cfg.hidden, cfg.noise_bank, rng);
  Tensor bank = Tensor({cfg.noise_bank, d}, 0.0);
  for (std::size_t i = 0; i < bank.size(); ++i) bank[i] = 0.02 * standard_normal(rng);
  ps.add("E_noise", std::move(bank));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    layers::add_decoder_layer(ps, dec_prefix(l), w, cfg.heads, cfg.hidden, rng);
  }
  layers::add_mlp(ps, "head", w, cfg.hidden, 1, rng);
  return mp;
}

std::size_t expected_parameter_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_inp;
  const std::size_t w = cfg.width();
  const std::size_t h = cfg.hidden;
  const std::size_t attn = 4 * w * w;
  const std::size_t ln = 2 * w;
  const std::size_t ffn = mlp_count(w, h, w);
  const std::size_t enc = attn + ln + ffn + ln;
  const std::size_t dec = 2 * attn + 3 * ln + ffn;
  return mlp_count(3, h, d) + mlp_count(1, h, d) + cfg.layers * (enc + dec) +
         mlp_count(d, h, cfg.noise_bank) + cfg.noise_bank * d + mlp_count(w, h, 1);
}

Tensor domain_tokens(std::span<const materials::Curve> mats,
                     std::span<const double> response_strains) {
  const std::size_t t_count = response_strains.size();
  Tensor out = Tensor({mats.size() * t_count, 3}, 0.0);
  for (std::size_t i = 0; i < mats.size(); ++i) {
    const auto& m = mats[i];
    if (m.strains.size() != t_count || m.stresses.size() != t_count) {
      throw DimensionError("material curve has " + std::to_string(m.strains.size()) +
                           " points, expected " + std::to_string(t_count));
    }
    for (std::size_t t = 0; t < t_count; ++t) {
      auto row = out.row(i * t_count + t);
      row[0] = m.strains[t];
      row[1] = m.stresses[t];
      row[2] = response_strains[t];
    }
  }
  return out;
}

Tensor prompt_domain_tokens(const dataset::PromptInstance& prompt) {
  std::vector<materials::Curve> mats;
  mats.reserve(prompt.k());
  for (const auto& p : prompt.pairs) mats.push_back(p.material);
  return domain_tokens(mats, prompt.pairs.front().response.strains);
}

Tensor prompt_solution_tokens(const dataset::PromptInstance& prompt) {
  const std::size_t t_count = prompt.pairs.front().response.size();
  Tensor out = Tensor({prompt.k() * t_count, 1}, 0.0);
  for (std::size_t i = 0; i < prompt.k(); ++i) {
    const auto& s = prompt.pairs[i].response.stresses;
    if (s.size() != t_count) throw DimensionError("response curves differ in length");
    for (std::size_t t = 0; t < t_count; ++t) out[i * t_count + t] = s[t];
  }
  return out;
}

Tensor query_domain_tokens(const dataset::PromptInstance& prompt) {
  return domain_tokens(prompt.query_materials, prompt.pairs.front().response.strains);
}

namespace {

void check_prompt(const ModelConfig& cfg, const dataset::PromptInstance& prompt) {
  prompt.validate();
  const std::size_t t_count = prompt.pairs.front().response.size();
  if (t_count != cfg.grid_points) {
    throw DimensionError("prompt grid has " + std::to_string(t_count) +
                         " points, model expects " + std::to_string(cfg.grid_points));
  }
}

struct Stages {
  Var z_domain, z_sol, z, h_enc, c_global;
};

Stages encode_graph(Tape& t, const ModelParams& mp, Var domain, Var solution, std::size_t k,
                    const layers::Dropout& drop) {
  const auto& cfg = mp.config;
  Stages s;
  s.z_domain = layers::mlp(t, mp.weights, "phi_domain", domain);
  s.z_sol = layers::mlp(t, mp.weights, "phi_sol", solution);
  const Var parts[] = {s.z_domain, s.z_sol};
  s.z = t.concat_cols(parts);
  Var h = s.z;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    h = layers::encoder_layer(t, mp.weights, enc_prefix(l), cfg.heads, h, drop);
  }
  s.h_enc = h;
  s.c_global = t.block_mean_rows(s.z_sol, k);
  return s;
}

// psi acts row-wise, so it is applied to the T context rows before tiling.
std::pair<Var, Var> noise_graph(Tape& t, const ModelParams& mp, Var c_global, std::size_t n) {
  Var w = t.tile_rows(layers::mlp(t, mp.weights, "psi", c_global), n);
  Var noise = t.matmul(w, t.param(mp.weights.at("E_noise")));
  return {w, noise};
}

std::pair<Var, Var> decode_graph(Tape& t, const ModelParams& mp, Var query, Var h_enc,
                                 Var n_dynamic, std::size_t n, const layers::Dropout& drop,
                                 Var* e_dec) {
  const auto& cfg = mp.config;
  const Var parts[] = {layers::mlp(t, mp.weights, "phi_domain", query), n_dynamic};
  Var e = t.concat_cols(parts);
  if (e_dec) *e_dec = e;
  Var h = e;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    h = layers::decoder_layer(t, mp.weights, dec_prefix(l), cfg.heads, h, h_enc, n, drop);
  }
  Var y = layers::mlp(t, mp.weights, "head", h);
  const std::size_t t_count = t.value(query).rows() / n;
  return {h, t.reshape(y, {n, t_count})};
}

}  // namespace

Var forward_graph(Tape& tape, const ModelParams& params, const dataset::PromptInstance& prompt,
                  Rng* dropout_rng, ForwardVars* vars) {
  check_prompt(params.config, prompt);
  const layers::Dropout drop{params.config.dropout, dropout_rng};
  const std::size_t n = prompt.n();
  Stages s = encode_graph(tape, params, tape.constant(prompt_domain_tokens(prompt)),
                          tape.constant(prompt_solution_tokens(prompt)), prompt.k(), drop);
  auto [w, noise] = noise_graph(tape, params, s.c_global, n);
  Var e_dec;
  auto [h_dec, y] = decode_graph(tape, params, tape.constant(query_domain_tokens(prompt)),
                                 s.h_enc, noise, n, drop, &e_dec);
  if (vars) {
    *vars = ForwardVars{s.z_domain, s.z_sol, s.z, s.h_enc, s.c_global, w, noise, e_dec, h_dec, y};
  }
  return y;
}

EncodedPrompt encode_prompt(const ModelParams& params, const dataset::PromptInstance& prompt) {
  check_prompt(params.config, prompt);
  Tape tape(false);
  Stages s = encode_graph(tape, params, tape.constant(prompt_domain_tokens(prompt)),
                          tape.constant(prompt_solution_tokens(prompt)), prompt.k(), {});
  return {tape.value(s.h_enc), tape.value(s.c_global)};
}

Tensor dynamic_noise(const ModelParams& params, const Tensor& c_global, std::size_t n) {
  const auto& cfg = params.config;
  if (c_global.rank() != 2 || c_global.rows() != cfg.grid_points || c_global.cols() != cfg.d_inp) {
    throw DimensionError("c_global must be T x d_inp, got " + to_string(c_global.shape()));
  }
  if (n == 0) throw ContractError("dynamic noise needs n >= 1");
  Tape tape(false);
  return tape.value(noise_graph(tape, params, tape.constant(c_global), n).second);
}

Tensor decode(const ModelParams& params, const Tensor& query_tokens, const Tensor& h_enc,
              const Tensor& n_dynamic) {
  const auto& cfg = params.config;
  if (query_tokens.rank() != 2 || query_tokens.cols() != 3 ||
      query_tokens.rows() % cfg.grid_points != 0) {
    throw DimensionError("query tokens must be (n*T) x 3, got " + to_string(query_tokens.shape()));
  }
  if (h_enc.rank() != 2 || h_enc.cols() != cfg.width()) {
    throw DimensionError("encoder memory must have " + std::to_string(cfg.width()) +
                         " columns, got " + to_string(h_enc.shape()));
  }
  if (n_dynamic.rank() != 2 || n_dynamic.rows() != query_tokens.rows() ||
      n_dynamic.cols() != cfg.d_inp) {
    throw DimensionError("dynamic noise must be (n*T) x d_inp, got " +
                         to_string(n_dynamic.shape()));
  }
  const std::size_t n = query_tokens.rows() / cfg.grid_points;
  Tape tape(false);
  auto [h, y] = decode_graph(tape, params, tape.constant(query_tokens), tape.constant(h_enc),
                             tape.constant(n_dynamic), n, {}, nullptr);
  return tape.value(y);
}

Tensor forward(const ModelParams& params, const dataset::PromptInstance& prompt) {
  Tape tape(false);
  return tape.value(forward_graph(tape, params, prompt));
}

ForwardTrace trace(const ModelParams& params, const dataset::PromptInstance& prompt) {
  Tape tape(false);
  ForwardVars v;
  forward_graph(tape, params, prompt, nullptr, &v);
  const std::size_t k = prompt.k();
  const std::size_t t_count = params.config.grid_points;
  const std::size_t d = params.config.d_inp;
  ForwardTrace tr;
  tr.z_domain = tape.value(v.z_domain).reshaped({k, t_count, d});
  tr.z_sol = tape.value(v.z_sol).reshaped({k, t_count, d});
  tr.z = tape.value(v.z).reshaped({k, t_count, 2 * d});
  tr.e_enc = tape.value(v.z);
  tr.h_enc = tape.value(v.h_enc);
  tr.c_global = tape.value(v.c_global);
  tr.w = tape.value(v.w);
  tr.n_dynamic = tape.value(v.n_dynamic);
  tr.e_dec = tape.value(v.e_dec);
  tr.h_dec = tape.value(v.h_dec);
  tr.y = tape.value(v.y);
  return tr;
}

void assign_weights(ParamSet& target, std::span<const std::pair<std::string, Tensor>> source) {
  if (source.size() != target.size()) {
    throw FormatError("weight count " + std::to_string(source.size()) + " does not match " +
                      std::to_string(target.size()));
  }
  for (std::size_t i = 0; i < source.size(); ++i) {
    const auto& [name, value] = source[i];
    auto& leaf = target[i];
    if (leaf.name != name || leaf.value.shape() != value.shape()) {
      throw FormatError("weight '" + name + "' " + to_string(value.shape()) +
                        " does not match expected '" + leaf.name + "' " +
                        to_string(leaf.value.shape()));
    }
    if (!value.all_finite()) throw FormatError("weight '" + name + "' is not finite");
    leaf.value = value;
  }
}

void save_checkpoint(const ModelParams& params, double stress_scale,
                     const std::filesystem::path& path) {
  Bundle b;
  b.kind = kCheckpointKind;
  json meta;
  meta["config"] = json::parse(to_json(params.config));
  meta["stress_scale"] = stress_scale;
  meta["parameter_count"] = params.weights.scalar_count();
  b.metadata = meta.dump();
  for (const auto& leaf : params.weights) b.tensors.emplace_back(leaf.name, leaf.value);
  write_bundle(path, b);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Bundle b = read_bundle(path);
  if (b.kind != kCheckpointKind) {
    throw FormatError("expected a " + std::string(kCheckpointKind) + " checkpoint, found '" +
                      b.kind + "'");
  }
  Checkpoint ck;
  try {
    const json meta = json::parse(b.metadata);
    ck.params = init_params(model_config_from_json(meta.at("config").dump()), 0);
    ck.stress_scale = meta.at("stress_scale").get<double>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed checkpoint metadata: ") + e.what());
  } catch (const ContractError& e) {
    throw FormatError(std::string("malformed checkpoint config: ") + e.what());
  }
  assign_weights(ck.params.weights, b.tensors);
  return ck;
}

}  // namespace metafo::model
