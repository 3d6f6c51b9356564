// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "nfe/tensor.hpp"

namespace nfe {

enum class Mode { train, eval };

/// Trainable tensor with its gradient accumulator.
template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  explicit Param(Tensor<T> v) : value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.zero(); }
};

struct ConvGeom {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;

  Shape weight_shape() const { return {out_channels, in_channels, kernel, kernel}; }
  std::size_t out_size(std::size_t in) const { return (in + 2 * pad - kernel) / stride + 1; }
};

/// y = conv(x, w). x: NCHW, w: OIHW, no bias.
template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const ConvGeom& g, Tensor<T>& y);

/// Accumulates dL/dw into `dw` (when non-null) and writes dL/dx into `dx` (when non-null).
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const ConvGeom& g, const Tensor<T>& dy, Tensor<T>* dw,
                     Tensor<T>* dx);

template <typename T>
struct BatchNorm {
  Param<T> gamma;
  Param<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels)
      : gamma(Tensor<T>({channels}, T(1))),
        beta(Tensor<T>({channels}, T(0))),
        running_mean({channels}, T(0)),
        running_var({channels}, T(1)) {}
  std::size_t channels() const { return gamma.value.size(); }
};

template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
};

/// Train mode normalises with batch statistics and, when `update_stats`,
/// folds them into the running estimates. Eval mode uses running estimates.
template <typename T>
void batchnorm_forward(const Tensor<T>& x, BatchNorm<T>& bn, Mode mode, bool update_stats, Tensor<T>& y,
                       BatchNormCache<T>* cache);

/// Train-mode backward. Accumulates into bn.gamma.grad / bn.beta.grad.
template <typename T>
void batchnorm_backward(const BatchNormCache<T>& cache, BatchNorm<T>& bn, const Tensor<T>& dy, Tensor<T>& dx);

template <typename T>
void relu_inplace(Tensor<T>& x);

/// dx = dy where the forward output was positive.
template <typename T>
void relu_backward_inplace(const Tensor<T>& out, Tensor<T>& dy);

/// [N, C, H, W] -> [N, C].
template <typename T>
void global_avg_pool_forward(const Tensor<T>& x, Tensor<T>& y);
template <typename T>
void global_avg_pool_backward(const Shape& x_shape, const Tensor<T>& dy, Tensor<T>& dx);

/// y = x w^T + b with x [N, in], w [out, in].
template <typename T>
void linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Tensor<T>& y);
template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Tensor<T>& dw, Tensor<T>& db,
                     Tensor<T>* dx);

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b);

}  // namespace nfe
