#pragma once

#include <cstddef>
#include <string>

#include "metafo/autodiff.hpp"
#include "metafo/random.hpp"

namespace metafo::layers {

/// Registers W (rows x cols) with Xavier-uniform entries.
void add_matrix(ParamSet& ps, const std::string& name, std::size_t rows, std::size_t cols,
                Rng& rng);
void add_bias(ParamSet& ps, const std::string& name, std::size_t cols);

/// Two-layer MLP in -> hidden -> out with GELU between.
void add_mlp(ParamSet& ps, const std::string& prefix, std::size_t in, std::size_t hidden,
             std::size_t out, Rng& rng);
void add_layer_norm(ParamSet& ps, const std::string& prefix, std::size_t width);
/// Per-head W_Q, W_K, W_V (width x width/heads) and a shared W_O.
void add_attention(ParamSet& ps, const std::string& prefix, std::size_t width, std::size_t heads,
                   Rng& rng);
void add_encoder_layer(ParamSet& ps, const std::string& prefix, std::size_t width,
                       std::size_t heads, std::size_t hidden, Rng& rng);
void add_decoder_layer(ParamSet& ps, const std::string& prefix, std::size_t width,
                       std::size_t heads, std::size_t hidden, Rng& rng);

/// Dropout source for training graphs; a null rng or zero rate disables it.
struct Dropout {
  double rate = 0.0;
  Rng* rng = nullptr;
};

Var mlp(Tape& t, const ParamSet& ps, const std::string& prefix, Var x);
Var layer_norm(Tape& t, const ParamSet& ps, const std::string& prefix, Var x);
/// Multi-head attention of queries xq over keys/values xkv. With blocks > 1,
/// xq and xkv are split into that many equal row blocks and block b attends
/// only within block b.
Var attention(Tape& t, const ParamSet& ps, const std::string& prefix, std::size_t heads, Var xq,
              Var xkv, std::size_t blocks = 1);
/// LN(x + MHA(x)), then LN(. + FFN(.)).
Var encoder_layer(Tape& t, const ParamSet& ps, const std::string& prefix, std::size_t heads,
                  Var x, const Dropout& drop = {});
/// Self-attention within `self_blocks` row blocks, cross-attention over
/// memory, FFN; each followed by a residual LayerNorm.
Var decoder_layer(Tape& t, const ParamSet& ps, const std::string& prefix, std::size_t heads,
                  Var x, Var memory, std::size_t self_blocks, const Dropout& drop = {});

}  // namespace metafo::layers
