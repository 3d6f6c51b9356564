// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "nfe/tensor.hpp"

namespace nfe {

/// Row-wise softmax of logits [n, C] divided by `temperature`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits, double temperature = 1.0);

/// Row-wise log-softmax of logits / temperature.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits, double temperature = 1.0);

/// Mean of the exit logits, z_E. Computed as z_1 + sum_i (z_i - z_1) / N so
/// that identical exits reproduce z_1 exactly.
template <typename T>
Tensor<T> ensemble_logits(std::span<const Tensor<T>> exit_logits);

/// Softened ensemble teacher q_E = softmax(z_E / T). Treated as a constant
/// by nfe_loss when the teacher is detached.
template <typename T>
Tensor<T> teacher_signal(const Tensor<T>& ensemble, double temperature);

struct LossOptions {
  double alpha = 1.0;
  double temperature = 3.0;
  /// Use temperature-softened exit outputs inside the CE term as well.
  bool soften_ce = false;
  /// Multiply the KL term by T^2 (off: the loss is used as written).
  bool scale_kl_by_t2 = false;
  /// Block gradient flow through q_E.
  bool detach_teacher = true;
};

template <typename T>
struct LossResult {
  double total = 0;                 // batch mean of sum_i [CE_i + alpha * KL_i]
  std::vector<double> ce;           // per exit, batch mean
  std::vector<double> kl;           // per exit, batch mean of KL(q_i || q_E), unweighted
  std::vector<Tensor<T>> grad;      // dL/dz_i, empty unless requested
};

/// Ensemble-distillation loss over N exits for a labelled batch.
template <typename T>
LossResult<T> nfe_loss(std::span<const Tensor<T>> exit_logits, std::span<const int> labels, const LossOptions& opts,
                       bool compute_grad = false);

}  // namespace nfe
