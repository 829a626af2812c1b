#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "metafo/tensor.hpp"

namespace metafo {

/// A named trainable array with its gradient buffer.
struct ParamLeaf {
  std::string name;
  Tensor value;
  Tensor grad;
};

/// Ordered collection of uniquely named parameters. Insertion order is the
/// canonical order for serialization and optimizer state.
class ParamSet {
 public:
  ParamLeaf& add(std::string name, Tensor value);

  ParamLeaf& at(std::string_view name);
  const ParamLeaf& at(std::string_view name) const;
  const ParamLeaf* find(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) != nullptr; }

  std::size_t size() const noexcept { return leaves_.size(); }
  /// Total number of scalar coordinates.
  std::size_t scalar_count() const noexcept;

  void zero_grad();
  /// Euclidean norm over every gradient coordinate.
  double grad_norm() const;

  auto begin() { return leaves_.begin(); }
  auto end() { return leaves_.end(); }
  auto begin() const { return leaves_.begin(); }
  auto end() const { return leaves_.end(); }
  ParamLeaf& operator[](std::size_t i) { return leaves_[i]; }
  const ParamLeaf& operator[](std::size_t i) const { return leaves_[i]; }

 private:
  std::deque<ParamLeaf> leaves_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

/// Reverse-mode differentiation tape.
///
/// Each op evaluates eagerly and, when the tape records gradients, appends a
/// closure that propagates the output gradient to its inputs. Ops are
/// deterministic; backward walks the tape in reverse insertion order.
class Tape {
 public:
  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const noexcept { return recording_; }

  /// Binds a parameter. Binding the same leaf twice returns the same Var.
  Var param(const ParamLeaf& leaf);
  Var constant(Tensor value);

  const Tensor& value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.leaf ? n.leaf->value : n.value;
  }
  /// Gradient of the last backward() target with respect to v (zeros if v
  /// did not influence it).
  Tensor grad(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must hold one value.
  void backward(Var loss);
  /// Adds the gradient of every bound parameter into the same-named leaf of
  /// `params`. Call after backward().
  void accumulate_grads(ParamSet& params) const;

  Var matmul(Var a, Var b);
  /// a * b^T
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  /// Adds a length-cols vector to every row.
  Var add_row(Var x, Var bias);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var gelu(Var x);
  Var sigmoid(Var x);
  Var layer_norm(Var x, Var gamma, Var beta);
  Var softmax_rows(Var x);
  Var linear(Var x, Var w, Var bias);
  Var concat_cols(std::span<const Var> parts);
  Var concat_rows(std::span<const Var> parts);
  Var slice_rows(Var x, std::size_t begin, std::size_t count);
  Var slice_cols(Var x, std::size_t begin, std::size_t count);
  /// Treats x as `blocks` stacked blocks of equal height and averages them.
  Var block_mean_rows(Var x, std::size_t blocks);
  /// Mean over all rows, producing a single row.
  Var mean_rows(Var x);
  /// Stacks `times` copies of x vertically.
  Var tile_rows(Var x, std::size_t times);
  Var gather_rows(Var x, std::vector<std::size_t> index);
  Var reshape(Var x, Shape shape);
  Var sum(Var x);
  Var mean(Var x);
  /// Mean squared difference against a constant target of identical size.
  Var mse(Var pred, const Tensor& target);
  /// Mean binary cross-entropy of targets given logits clamped to [-clamp, clamp].
  Var bce_with_logits(Var logits, const Tensor& targets, double clamp = 30.0);
  /// Inverted dropout; identity when rate == 0.
  Var dropout(Var x, double rate, std::mt19937_64& rng);

 private:
  using Backprop = std::function<void(Tape&, const Tensor&)>;

  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    const ParamLeaf* leaf = nullptr;
    Backprop backprop;
  };

  Var push(Tensor value, bool needs_grad, Backprop backprop);
  bool needs(Var v) const { return nodes_[v.id].needs_grad; }
  Tensor& grad_slot(Var v);
  void accumulate(Var v, const Tensor& g);
  void accumulate(Var v, Tensor&& g);

  bool recording_;
  std::vector<Node> nodes_;
  std::unordered_map<const ParamLeaf*, std::size_t> bound_;
};

}  // namespace metafo
