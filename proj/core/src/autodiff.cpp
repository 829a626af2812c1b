#include "metafo/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "metafo/errors.hpp"
#include "metafo/kernels.hpp"

namespace metafo {

// ---------------------------------------------------------------------------
// ParamSet

ParamLeaf& ParamSet::add(std::string name, Tensor value) {
  if (index_.contains(name)) throw ContractError("duplicate parameter name: " + name);
  Tensor grad(value.shape());
  index_.emplace(name, leaves_.size());
  leaves_.push_back(ParamLeaf{std::move(name), std::move(value), std::move(grad)});
  return leaves_.back();
}

ParamLeaf& ParamSet::at(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractError("unknown parameter: " + std::string(name));
  return leaves_[it->second];
}

const ParamLeaf& ParamSet::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractError("unknown parameter: " + std::string(name));
  return leaves_[it->second];
}

const ParamLeaf* ParamSet::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : &leaves_[it->second];
}

std::size_t ParamSet::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& leaf : leaves_) n += leaf.value.size();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& leaf : leaves_) leaf.grad.fill(0.0);
}

double ParamSet::grad_norm() const {
  double total = 0.0;
  for (const auto& leaf : leaves_) {
    for (double g : leaf.grad.data()) total += g * g;
  }
  return std::sqrt(total);
}

// ---------------------------------------------------------------------------
// Tape bookkeeping

Var Tape::push(Tensor value, bool needs_grad, Backprop backprop) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = recording_ && needs_grad;
  if (node.needs_grad) node.backprop = std::move(backprop);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Var Tape::param(const ParamLeaf& leaf) {
  if (auto it = bound_.find(&leaf); it != bound_.end()) return Var{it->second};
  Node node;
  node.leaf = &leaf;
  node.needs_grad = recording_;
  nodes_.push_back(std::move(node));
  bound_.emplace(&leaf, nodes_.size() - 1);
  return Var{nodes_.size() - 1};
}

Var Tape::constant(Tensor value) { return push(std::move(value), false, nullptr); }

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) return Tensor(value(v).shape());
  return n.grad;
}

Tensor& Tape::grad_slot(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty()) n.grad = Tensor(value(v).shape());
  return n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
  Node& n = nodes_[v.id];
  if (!n.needs_grad) return;
  if (n.grad.empty()) {
    n.grad = g.reshaped(value(v).shape());
    return;
  }
  if (g.size() != n.grad.size()) throw DimensionError("gradient size mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

void Tape::accumulate(Var v, Tensor&& g) {
  Node& n = nodes_[v.id];
  if (!n.needs_grad) return;
  if (n.grad.empty() && g.shape() == value(v).shape()) {
    n.grad = std::move(g);
    return;
  }
  accumulate(v, static_cast<const Tensor&>(g));
}

void Tape::backward(Var loss) {
  if (!recording_) throw ContractError("backward on a tape that does not record gradients");
  if (value(loss).size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        to_string(value(loss).shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  if (!nodes_[loss.id].needs_grad) return;
  nodes_[loss.id].grad = Tensor(value(loss).shape(), 1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backprop) continue;
    n.backprop(*this, n.grad);
  }
}

void Tape::accumulate_grads(ParamSet& params) const {
  // Parameters are visited in tape order so accumulation is reproducible.
  for (const auto& n : nodes_) {
    if (!n.leaf || n.grad.empty()) continue;
    ParamLeaf& target = params.at(n.leaf->name);
    if (target.grad.size() != n.grad.size()) {
      throw DimensionError("gradient shape mismatch for " + target.name);
    }
    for (std::size_t i = 0; i < n.grad.size(); ++i) target.grad[i] += n.grad[i];
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace {

void require_same_size(const Tensor& a, const Tensor& b, const char* op) {
  if (a.size() != b.size()) {
    throw DimensionError(std::string(op) + ": " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

}  // namespace

Var Tape::matmul(Var a, Var b) {
  Tensor out = metafo::matmul(value(a), value(b));
  return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, const Tensor& g) {
    if (t.needs(a)) t.accumulate(a, metafo::matmul_nt(g, t.value(b)));
    if (t.needs(b)) t.accumulate(b, metafo::matmul_tn(t.value(a), g));
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  Tensor out = metafo::matmul_nt(value(a), value(b));
  return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, const Tensor& g) {
    if (t.needs(a)) t.accumulate(a, metafo::matmul(g, t.value(b)));
    if (t.needs(b)) t.accumulate(b, metafo::matmul_tn(g, t.value(a)));
  });
}

Var Tape::add(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require_same_size(x, y, "add");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var Tape::sub(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require_same_size(x, y, "sub");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (t.needs(b)) {
      Tensor neg = g;
      for (auto& v : neg.data()) v = -v;
      t.accumulate(b, std::move(neg));
    }
  });
}

Var Tape::add_row(Var x, Var bias) {
  const Tensor& xv = value(x);
  const Tensor& bv = value(bias);
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_row: " + to_string(xv.shape()) + " + " + to_string(bv.shape()));
  }
  Tensor out = xv;
  const std::size_t cols = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < cols; ++c) row[c] += bv[c];
  }
  return push(std::move(out), needs(x) || needs(bias), [x, bias](Tape& t, const Tensor& g) {
    t.accumulate(x, g);
    if (t.needs(bias)) {
      Tensor db(t.value(bias).shape());
      const std::size_t cols = g.cols();
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t c = 0; c < cols; ++c) db[c] += row[c];
      }
      t.accumulate(bias, std::move(db));
    }
  });
}

Var Tape::mul(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require_same_size(x, y, "mul");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, const Tensor& g) {
    if (t.needs(a)) {
      Tensor da = g;
      const Tensor& y = t.value(b);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] *= y[i];
      t.accumulate(a, std::move(da));
    }
    if (t.needs(b)) {
      Tensor db = g;
      const Tensor& x = t.value(a);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] *= x[i];
      t.accumulate(b, std::move(db));
    }
  });
}

Var Tape::scale(Var a, double s) {
  Tensor out = value(a);
  for (auto& v : out.data()) v *= s;
  return push(std::move(out), needs(a), [a, s](Tape& t, const Tensor& g) {
    Tensor da = g;
    for (auto& v : da.data()) v *= s;
    t.accumulate(a, std::move(da));
  });
}

Var Tape::gelu(Var x) {
  Tensor out = metafo::gelu(value(x));
  return push(std::move(out), needs(x), [x](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    Tensor dx = g;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= gelu_derivative(xv[i]);
    t.accumulate(x, std::move(dx));
  });
}

Var Tape::sigmoid(Var x) {
  Tensor out = value(x);
  for (auto& v : out.data()) v = 1.0 / (1.0 + std::exp(-v));
  const std::size_t self = nodes_.size();
  return push(std::move(out), needs(x), [x, self](Tape& t, const Tensor& g) {
    const Tensor& y = t.nodes_[self].value;
    Tensor dx = g;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= y[i] * (1.0 - y[i]);
    t.accumulate(x, std::move(dx));
  });
}

Var Tape::layer_norm(Var x, Var gamma, Var beta) {
  struct Cache {
    Tensor normalized;
    std::vector<double> inv_std;
  };
  auto cache = std::make_shared<Cache>();
  const bool grad = recording_ && (needs(x) || needs(gamma) || needs(beta));
  Tensor out = metafo::layer_norm(value(x), value(gamma), value(beta),
                                  grad ? &cache->normalized : nullptr,
                                  grad ? &cache->inv_std : nullptr);
  return push(std::move(out), grad, [x, gamma, beta, cache](Tape& t, const Tensor& g) {
    auto grads = layer_norm_backward(cache->normalized, cache->inv_std, t.value(gamma), g);
    t.accumulate(x, std::move(grads.dx));
    t.accumulate(gamma, std::move(grads.dgamma));
    t.accumulate(beta, std::move(grads.dbeta));
  });
}

Var Tape::softmax_rows(Var x) {
  Tensor out = metafo::softmax_rows(value(x));
  const std::size_t self = nodes_.size();
  return push(std::move(out), needs(x), [x, self](Tape& t, const Tensor& g) {
    t.accumulate(x, softmax_rows_backward(t.nodes_[self].value, g));
  });
}

Var Tape::linear(Var x, Var w, Var bias) { return add_row(matmul(x, w), bias); }

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  const std::size_t rows = value(parts[0]).rows();
  std::size_t cols = 0;
  bool any = false;
  for (Var p : parts) {
    if (value(p).rows() != rows) throw DimensionError("concat_cols: row count mismatch");
    cols += value(p).cols();
    any = any || needs(p);
  }
  Tensor out({rows, cols});
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& v = value(p);
    const std::size_t c = v.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.row(r).begin(), c, out.row(r).begin() + static_cast<std::ptrdiff_t>(offset));
    }
    offset += c;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return push(std::move(out), any, [inputs](Tape& t, const Tensor& g) {
    std::size_t offset = 0;
    for (Var p : inputs) {
      const Tensor& v = t.value(p);
      const std::size_t c = v.cols();
      if (t.needs(p)) {
        Tensor d(v.shape());
        for (std::size_t r = 0; r < g.rows(); ++r) {
          std::copy_n(g.row(r).begin() + static_cast<std::ptrdiff_t>(offset), c,
                      d.row(r).begin());
        }
        t.accumulate(p, std::move(d));
      }
      offset += c;
    }
  });
}

Var Tape::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no operands");
  const std::size_t cols = value(parts[0]).cols();
  std::size_t rows = 0;
  bool any = false;
  for (Var p : parts) {
    if (value(p).cols() != cols) throw DimensionError("concat_rows: column count mismatch");
    rows += value(p).rows();
    any = any || needs(p);
  }
  Tensor out({rows, cols});
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& v = value(p);
    std::copy(v.data().begin(), v.data().end(), out.data().begin() +
                                                    static_cast<std::ptrdiff_t>(offset));
    offset += v.size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return push(std::move(out), any, [inputs](Tape& t, const Tensor& g) {
    std::size_t offset = 0;
    for (Var p : inputs) {
      const Tensor& v = t.value(p);
      if (t.needs(p)) {
        std::vector<double> d(g.data().begin() + static_cast<std::ptrdiff_t>(offset),
                              g.data().begin() + static_cast<std::ptrdiff_t>(offset + v.size()));
        t.accumulate(p, Tensor(v.shape(), std::move(d)));
      }
      offset += v.size();
    }
  });
}

Var Tape::slice_rows(Var x, std::size_t begin, std::size_t count) {
  const Tensor& v = value(x);
  if (count == 0 || begin + count > v.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", +" +
                         std::to_string(count) + ") of " + std::to_string(v.rows()) + " rows");
  }
  const std::size_t cols = v.cols();
  std::vector<double> d(v.data().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                        v.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * cols));
  return push(Tensor({count, cols}, std::move(d)), needs(x),
              [x, begin, cols](Tape& t, const Tensor& g) {
                Tensor dx(t.value(x).shape());
                std::copy(g.data().begin(), g.data().end(),
                          dx.data().begin() + static_cast<std::ptrdiff_t>(begin * cols));
                t.accumulate(x, std::move(dx));
              });
}

Var Tape::slice_cols(Var x, std::size_t begin, std::size_t count) {
  const Tensor& v = value(x);
  if (count == 0 || begin + count > v.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", +" +
                         std::to_string(count) + ") of " + std::to_string(v.cols()) + " cols");
  }
  Tensor out({v.rows(), count});
  for (std::size_t r = 0; r < v.rows(); ++r) {
    std::copy_n(v.row(r).begin() + static_cast<std::ptrdiff_t>(begin), count,
                out.row(r).begin());
  }
  return push(std::move(out), needs(x), [x, begin, count](Tape& t, const Tensor& g) {
    const Tensor& v = t.value(x);
    Tensor dx(v.shape());
    for (std::size_t r = 0; r < g.rows(); ++r) {
      std::copy_n(g.row(r).begin(), count,
                  dx.row(r).begin() + static_cast<std::ptrdiff_t>(begin));
    }
    t.accumulate(x, std::move(dx));
  });
}

Var Tape::block_mean_rows(Var x, std::size_t blocks) {
  const Tensor& v = value(x);
  if (blocks == 0 || v.rows() % blocks != 0) {
    throw DimensionError("block_mean_rows: " + std::to_string(v.rows()) +
                         " rows not divisible into " + std::to_string(blocks) + " blocks");
  }
  const std::size_t h = v.rows() / blocks;
  const std::size_t cols = v.cols();
  Tensor out({h, cols});
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t r = 0; r < h; ++r) {
      auto src = v.row(b * h + r);
      auto dst = out.row(r);
      for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
    }
  }
  const double inv = 1.0 / static_cast<double>(blocks);
  for (auto& e : out.data()) e *= inv;
  return push(std::move(out), needs(x), [x, blocks, h, cols, inv](Tape& t, const Tensor& g) {
    Tensor dx(t.value(x).shape());
    for (std::size_t b = 0; b < blocks; ++b) {
      for (std::size_t r = 0; r < h; ++r) {
        auto dst = dx.row(b * h + r);
        auto src = g.row(r);
        for (std::size_t c = 0; c < cols; ++c) dst[c] = src[c] * inv;
      }
    }
    t.accumulate(x, std::move(dx));
  });
}

Var Tape::mean_rows(Var x) {
  const Tensor& v = value(x);
  return reshape(block_mean_rows(reshape(x, {v.rows(), v.cols()}), v.rows()), {1, v.cols()});
}

Var Tape::tile_rows(Var x, std::size_t times) {
  if (times == 0) throw DimensionError("tile_rows: zero copies");
  const Tensor& v = value(x);
  const std::size_t rows = v.rows();
  const std::size_t cols = v.cols();
  Tensor out({rows * times, cols});
  for (std::size_t k = 0; k < times; ++k) {
    std::copy(v.data().begin(), v.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(k * v.size()));
  }
  return push(std::move(out), needs(x), [x, times](Tape& t, const Tensor& g) {
    const Tensor& v = t.value(x);
    Tensor dx(v.shape());
    for (std::size_t k = 0; k < times; ++k) {
      for (std::size_t i = 0; i < v.size(); ++i) dx[i] += g[k * v.size() + i];
    }
    t.accumulate(x, std::move(dx));
  });
}

Var Tape::gather_rows(Var x, std::vector<std::size_t> index) {
  const Tensor& v = value(x);
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  const std::size_t cols = v.cols();
  Tensor out({index.size(), cols});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= v.rows()) throw DimensionError("gather_rows: index out of range");
    std::copy_n(v.row(index[i]).begin(), cols, out.row(i).begin());
  }
  return push(std::move(out), needs(x),
              [x, index = std::move(index), cols](Tape& t, const Tensor& g) {
                Tensor dx(t.value(x).shape());
                for (std::size_t i = 0; i < index.size(); ++i) {
                  auto dst = dx.row(index[i]);
                  auto src = g.row(i);
                  for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
                }
                t.accumulate(x, std::move(dx));
              });
}

Var Tape::reshape(Var x, Shape shape) {
  Tensor out = value(x).reshaped(std::move(shape));
  return push(std::move(out), needs(x), [x](Tape& t, const Tensor& g) {
    t.accumulate(x, g.reshaped(t.value(x).shape()));
  });
}

Var Tape::sum(Var x) {
  double total = 0.0;
  for (double v : value(x).data()) total += v;
  return push(Tensor::scalar(total), needs(x), [x](Tape& t, const Tensor& g) {
    t.accumulate(x, Tensor(t.value(x).shape(), g[0]));
  });
}

Var Tape::mean(Var x) {
  const double n = static_cast<double>(value(x).size());
  return scale(sum(x), 1.0 / n);
}

Var Tape::mse(Var pred, const Tensor& target) {
  const Tensor& p = value(pred);
  require_same_size(p, target, "mse");
  const double n = static_cast<double>(p.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - target[i];
    total += d * d;
  }
  return push(Tensor::scalar(total / n), needs(pred),
              [pred, target, n](Tape& t, const Tensor& g) {
                const Tensor& p = t.value(pred);
                Tensor dp(p.shape());
                for (std::size_t i = 0; i < p.size(); ++i) {
                  dp[i] = g[0] * 2.0 * (p[i] - target[i]) / n;
                }
                t.accumulate(pred, std::move(dp));
              });
}

Var Tape::bce_with_logits(Var logits, const Tensor& targets, double clamp) {
  const Tensor& z = value(logits);
  require_same_size(z, targets, "bce_with_logits");
  const double n = static_cast<double>(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double zc = std::clamp(z[i], -clamp, clamp);
    total += std::max(zc, 0.0) - zc * targets[i] + std::log1p(std::exp(-std::abs(zc)));
  }
  return push(Tensor::scalar(total / n), needs(logits),
              [logits, targets, n, clamp](Tape& t, const Tensor& g) {
                const Tensor& z = t.value(logits);
                Tensor dz(z.shape());
                for (std::size_t i = 0; i < z.size(); ++i) {
                  if (z[i] <= -clamp || z[i] >= clamp) continue;
                  const double s = 1.0 / (1.0 + std::exp(-z[i]));
                  dz[i] = g[0] * (s - targets[i]) / n;
                }
                t.accumulate(logits, std::move(dz));
              });
}

Var Tape::dropout(Var x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout rate must be below 1");
  const Tensor& v = value(x);
  Tensor mask(v.shape());
  const double keep = 1.0 / (1.0 - rate);
  for (auto& m : mask.data()) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    m = u < rate ? 0.0 : keep;
  }
  Tensor out = v;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return push(std::move(out), needs(x), [x, mask](Tape& t, const Tensor& g) {
    Tensor dx = g;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= mask[i];
    t.accumulate(x, std::move(dx));
  });
}

}  // namespace metafo
