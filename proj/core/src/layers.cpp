#include "layers.hpp"

#include <cmath>
#include <vector>

#include "metafo/errors.hpp"

namespace metafo::layers {

void add_matrix(ParamSet& ps, const std::string& name, std::size_t rows, std::size_t cols,
                Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Tensor w = Tensor({rows, cols}, 0.0);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = uniform(rng, -bound, bound);
  ps.add(name, std::move(w));
}

void add_bias(ParamSet& ps, const std::string& name, std::size_t cols) {
  ps.add(name, Tensor({cols}, 0.0));
}

void add_mlp(ParamSet& ps, const std::string& prefix, std::size_t in, std::size_t hidden,
             std::size_t out, Rng& rng) {
  add_matrix(ps, prefix + ".W1", in, hidden, rng);
  add_bias(ps, prefix + ".b1", hidden);
  add_matrix(ps, prefix + ".W2", hidden, out, rng);
  add_bias(ps, prefix + ".b2", out);
}

void add_layer_norm(ParamSet& ps, const std::string& prefix, std::size_t width) {
  ps.add(prefix + ".gamma", Tensor({width}, 1.0));
  ps.add(prefix + ".beta", Tensor({width}, 0.0));
}

void add_attention(ParamSet& ps, const std::string& prefix, std::size_t width, std::size_t heads,
                   Rng& rng) {
  if (heads == 0 || width % heads != 0) {
    throw ContractError("attention width " + std::to_string(width) + " not divisible by " +
                        std::to_string(heads) + " heads");
  }
  const std::size_t dk = width / heads;
  for (const char* m : {"W_Q", "W_K", "W_V"}) {
    for (std::size_t h = 0; h < heads; ++h) {
      add_matrix(ps, prefix + "." + m + ".h" + std::to_string(h), width, dk, rng);
    }
  }
  add_matrix(ps, prefix + ".W_O", width, width, rng);
}

void add_encoder_layer(ParamSet& ps, const std::string& prefix, std::size_t width,
                       std::size_t heads, std::size_t hidden, Rng& rng) {
  add_attention(ps, prefix + ".attn", width, heads, rng);
  add_layer_norm(ps, prefix + ".ln1", width);
  add_mlp(ps, prefix + ".ffn", width, hidden, width, rng);
  add_layer_norm(ps, prefix + ".ln2", width);
}

void add_decoder_layer(ParamSet& ps, const std::string& prefix, std::size_t width,
                       std::size_t heads, std::size_t hidden, Rng& rng) {
  add_attention(ps, prefix + ".self_attn", width, heads, rng);
  add_layer_norm(ps, prefix + ".ln1", width);
  add_attention(ps, prefix + ".cross_attn", width, heads, rng);
  add_layer_norm(ps, prefix + ".ln2", width);
  add_mlp(ps, prefix + ".ffn", width, hidden, width, rng);
  add_layer_norm(ps, prefix + ".ln3", width);
}

namespace {

Var p(Tape& t, const ParamSet& ps, const std::string& name) { return t.param(ps.at(name)); }

Var apply_dropout(Tape& t, Var x, const Dropout& drop) {
  if (drop.rng == nullptr || drop.rate == 0.0) return x;
  return t.dropout(x, drop.rate, *drop.rng);
}

}  // namespace

Var mlp(Tape& t, const ParamSet& ps, const std::string& prefix, Var x) {
  Var h = t.gelu(t.linear(x, p(t, ps, prefix + ".W1"), p(t, ps, prefix + ".b1")));
  return t.linear(h, p(t, ps, prefix + ".W2"), p(t, ps, prefix + ".b2"));
}

Var layer_norm(Tape& t, const ParamSet& ps, const std::string& prefix, Var x) {
  return t.layer_norm(x, p(t, ps, prefix + ".gamma"), p(t, ps, prefix + ".beta"));
}

Var attention(Tape& t, const ParamSet& ps, const std::string& prefix, std::size_t heads, Var xq,
              Var xkv, std::size_t blocks) {
  const std::size_t rows_q = t.value(xq).rows();
  const std::size_t rows_kv = t.value(xkv).rows();
  if (blocks == 0 || rows_q % blocks != 0 || rows_kv % blocks != 0) {
    throw DimensionError("attention rows " + std::to_string(rows_q) + "/" +
                         std::to_string(rows_kv) + " not divisible into " +
                         std::to_string(blocks) + " blocks");
  }
  const std::size_t bq = rows_q / blocks;
  const std::size_t bkv = rows_kv / blocks;
  std::vector<Var> head_out;
  head_out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::string suffix = ".h" + std::to_string(h);
    Var wq = p(t, ps, prefix + ".W_Q" + suffix);
    Var wk = p(t, ps, prefix + ".W_K" + suffix);
    Var wv = p(t, ps, prefix + ".W_V" + suffix);
    Var q = t.matmul(xq, wq);
    Var k = t.matmul(xkv, wk);
    Var v = t.matmul(xkv, wv);
    const double s = 1.0 / std::sqrt(static_cast<double>(t.value(wq).cols()));
    if (blocks == 1) {
      Var a = t.softmax_rows(t.scale(t.matmul_nt(q, k), s));
      head_out.push_back(t.matmul(a, v));
    } else {
      std::vector<Var> parts;
      parts.reserve(blocks);
      for (std::size_t b = 0; b < blocks; ++b) {
        Var qb = t.slice_rows(q, b * bq, bq);
        Var kb = t.slice_rows(k, b * bkv, bkv);
        Var vb = t.slice_rows(v, b * bkv, bkv);
        Var a = t.softmax_rows(t.scale(t.matmul_nt(qb, kb), s));
        parts.push_back(t.matmul(a, vb));
      }
      head_out.push_back(t.concat_rows(parts));
    }
  }
  Var joined = heads == 1 ? head_out.front() : t.concat_cols(head_out);
  return t.matmul(joined, p(t, ps, prefix + ".W_O"));
}

Var encoder_layer(Tape& t, const ParamSet& ps, const std::string& prefix, std::size_t heads,
                  Var x, const Dropout& drop) {
  Var a = apply_dropout(t, attention(t, ps, prefix + ".attn", heads, x, x), drop);
  Var z = layer_norm(t, ps, prefix + ".ln1", t.add(x, a));
  Var f = apply_dropout(t, mlp(t, ps, prefix + ".ffn", z), drop);
  return layer_norm(t, ps, prefix + ".ln2", t.add(z, f));
}

Var decoder_layer(Tape& t, const ParamSet& ps, const std::string& prefix, std::size_t heads,
                  Var x, Var memory, std::size_t self_blocks, const Dropout& drop) {
  Var a = apply_dropout(t, attention(t, ps, prefix + ".self_attn", heads, x, x, self_blocks), drop);
  Var u = layer_norm(t, ps, prefix + ".ln1", t.add(x, a));
  Var c = apply_dropout(t, attention(t, ps, prefix + ".cross_attn", heads, u, memory), drop);
  Var v = layer_norm(t, ps, prefix + ".ln2", t.add(u, c));
  Var f = apply_dropout(t, mlp(t, ps, prefix + ".ffn", v), drop);
  return layer_norm(t, ps, prefix + ".ln3", t.add(v, f));
}

}  // namespace metafo::layers
