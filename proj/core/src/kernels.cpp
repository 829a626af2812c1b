#include "metafo/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "metafo/errors.hpp"

namespace metafo {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.ptr(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

MutMap as_matrix(Tensor& t) {
  return MutMap(t.ptr(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.empty()) throw DimensionError(std::string(what) + ": empty operand");
}

// Output shape keeps A's leading axes and replaces the last with n.
Shape product_shape(const Tensor& a, std::size_t n) {
  Shape s = a.shape();
  if (s.size() == 1) return {1, n};
  s.back() = n;
  return s;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (b.rank() != 2 || a.cols() != b.shape()[0]) {
    throw DimensionError("matmul: " + to_string(a.shape()) + " * " + to_string(b.shape()));
  }
  Tensor c(product_shape(a, b.cols()));
  as_matrix(c).noalias() = as_matrix(a) * as_matrix(b);
  c.require_finite("matmul");
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + to_string(a.shape()) + " * " +
                         to_string(b.shape()) + "^T");
  }
  Tensor c({a.rows(), b.rows()});
  as_matrix(c).noalias() = as_matrix(a) * as_matrix(b).transpose();
  c.require_finite("matmul_nt");
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: " + to_string(a.shape()) + "^T * " +
                         to_string(b.shape()));
  }
  Tensor c({a.cols(), b.cols()});
  as_matrix(c).noalias() = as_matrix(a).transpose() * as_matrix(b);
  c.require_finite("matmul_tn");
  return c;
}

Tensor softmax_rows(const Tensor& m) {
  m.require_finite("softmax_rows input");
  Tensor out = m;
  const std::size_t cols = m.cols();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (auto& v : row) {
      v = std::exp(v - mx);
      total += v;
    }
    const double inv = 1.0 / total;
    for (std::size_t c = 0; c < cols; ++c) row[c] *= inv;
  }
  return out;
}

Tensor softmax_rows_backward(const Tensor& y, const Tensor& dy) {
  Tensor dx(y.shape());
  const std::size_t cols = y.cols();
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto yr = y.row(r);
    auto gr = dy.row(r);
    double dot = 0.0;
    for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
    auto out = dx.row(r);
    for (std::size_t c = 0; c < cols; ++c) out[c] = yr[c] * (gr[c] - dot);
  }
  return dx;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor* normalized,
                  std::vector<double>* inv_std) {
  const std::size_t d = x.cols();
  if (gamma.size() != d || beta.size() != d) {
    throw DimensionError("layer_norm: last axis " + std::to_string(d) + " vs gamma " +
                         to_string(gamma.shape()) + ", beta " + to_string(beta.shape()));
  }
  Tensor out(x.shape());
  if (normalized) *normalized = Tensor(x.shape());
  if (inv_std) inv_std->assign(x.rows(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto xr = x.row(r);
    double mean = 0.0;
    for (double v : xr) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      const double xh = (xr[c] - mean) * is;
      o[c] = gamma[c] * xh + beta[c];
      if (normalized) (*normalized)(r, c) = xh;
    }
    if (inv_std) (*inv_std)[r] = is;
  }
  out.require_finite("layer_norm");
  return out;
}

LayerNormGrads layer_norm_backward(const Tensor& normalized, const std::vector<double>& inv_std,
                                   const Tensor& gamma, const Tensor& dy) {
  const std::size_t d = normalized.cols();
  LayerNormGrads g{Tensor(normalized.shape()), Tensor({d}), Tensor({d})};
  std::vector<double> dxh(d);
  for (std::size_t r = 0; r < normalized.rows(); ++r) {
    auto xh = normalized.row(r);
    auto gy = dy.row(r);
    double mean_dxh = 0.0;
    double mean_dxh_xh = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      g.dgamma[c] += gy[c] * xh[c];
      g.dbeta[c] += gy[c];
      dxh[c] = gy[c] * gamma[c];
      mean_dxh += dxh[c];
      mean_dxh_xh += dxh[c] * xh[c];
    }
    mean_dxh /= static_cast<double>(d);
    mean_dxh_xh /= static_cast<double>(d);
    auto out = g.dx.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      out[c] = inv_std[r] * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh);
    }
  }
  return g;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) * (std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu(x[i]);
  out.require_finite("gelu");
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (bias.size() != w.cols()) {
    throw DimensionError("linear: bias " + to_string(bias.shape()) + " vs weight " +
                         to_string(w.shape()));
  }
  Tensor out = matmul(x, w);
  const std::size_t n = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto o = out.row(r);
    for (std::size_t c = 0; c < n; ++c) o[c] += bias[c];
  }
  return out;
}

Tensor transpose(const Tensor& m) {
  Tensor out({m.cols(), m.rows()});
  as_matrix(out) = as_matrix(m).transpose();
  return out;
}

}  // namespace metafo
