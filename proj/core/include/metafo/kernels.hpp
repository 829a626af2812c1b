#pragma once

#include "metafo/tensor.hpp"

namespace metafo {

/// C = A * B for A (m x k), B (k x n). Leading axes of A are folded into rows.
Tensor matmul(const Tensor& a, const Tensor& b);
/// C = A * B^T for A (m x k), B (n x k).
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// C = A^T * B for A (k x m), B (k x n).
Tensor matmul_tn(const Tensor& a, const Tensor& b);

/// Row-wise softmax with max subtraction.
Tensor softmax_rows(const Tensor& m);
/// Given y = softmax_rows(x) and dL/dy, returns dL/dx.
Tensor softmax_rows_backward(const Tensor& y, const Tensor& dy);

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each last-axis vector with its biased variance, then applies
/// gamma and beta. `normalized` and `inv_std`, when given, receive the values
/// the backward pass needs.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor* normalized = nullptr, std::vector<double>* inv_std = nullptr);

struct LayerNormGrads {
  Tensor dx;
  Tensor dgamma;
  Tensor dbeta;
};

LayerNormGrads layer_norm_backward(const Tensor& normalized, const std::vector<double>& inv_std,
                                   const Tensor& gamma, const Tensor& dy);

/// Exact GELU: x * Phi(x) with the erf-based normal CDF.
double gelu(double x);
double gelu_derivative(double x);
Tensor gelu(const Tensor& x);

/// x * W + bias along the last axis.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor transpose(const Tensor& m);

}  // namespace metafo
