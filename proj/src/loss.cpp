// SPDX-License-Identifier: Apache-2.0
#include "nfe/loss.hpp"

#include <algorithm>
#include <cmath>

namespace nfe {

namespace {

void check_logits(const Shape& s, const char* what) {
  if (s.size() != 2 || s[1] == 0) fail(ErrorKind::shape_mismatch, std::string(what) + ": expected [n, C] logits");
}

}  // namespace

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits, double temperature) {
  check_logits(logits.shape(), "log_softmax");
  require(temperature > 0.0, "temperature must be positive");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  Tensor<T> out(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* z = logits.data() + i * c;
    T* o = out.data() + i * c;
    double mx = -INFINITY;
    for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, static_cast<double>(z[k]) / temperature);
    double sum = 0.0;
    for (std::size_t k = 0; k < c; ++k) sum += std::exp(static_cast<double>(z[k]) / temperature - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t k = 0; k < c; ++k) o[k] = static_cast<T>(static_cast<double>(z[k]) / temperature - lse);
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits, double temperature) {
  Tensor<T> out = log_softmax(logits, temperature);
  for (auto& v : out.values()) v = static_cast<T>(std::exp(static_cast<double>(v)));
  return out;
}

template <typename T>
Tensor<T> ensemble_logits(std::span<const Tensor<T>> exit_logits) {
  require(!exit_logits.empty(), "ensemble_logits needs at least one exit");
  const auto& first = exit_logits.front();
  for (const auto& z : exit_logits)
    if (!z.same_shape(first)) fail(ErrorKind::shape_mismatch, "exit logits differ in shape");
  const double n = static_cast<double>(exit_logits.size());
  Tensor<T> out(first.shape());
  for (std::size_t k = 0; k < first.size(); ++k) {
    double delta = 0.0;
    for (std::size_t j = 1; j < exit_logits.size(); ++j)
      delta += static_cast<double>(exit_logits[j][k]) - static_cast<double>(first[k]);
    out[k] = static_cast<T>(static_cast<double>(first[k]) + delta / n);
  }
  return out;
}

template <typename T>
Tensor<T> teacher_signal(const Tensor<T>& ensemble, double temperature) {
  require(temperature > 0.0, "temperature must be positive");
  return softmax(ensemble, temperature);
}

template <typename T>
LossResult<T> nfe_loss(std::span<const Tensor<T>> exit_logits, std::span<const int> labels, const LossOptions& opts,
                       bool compute_grad) {
  require(!exit_logits.empty(), "nfe_loss needs at least one exit");
  require(opts.alpha >= 0.0, "alpha must be non-negative");
  require(opts.temperature > 0.0, "temperature must be positive");
  check_logits(exit_logits.front().shape(), "nfe_loss");
  const std::size_t n = exit_logits.front().dim(0), c = exit_logits.front().dim(1);
  require(labels.size() == n, "one label per sample is required");
  for (int y : labels) require(y >= 0 && static_cast<std::size_t>(y) < c, "label index out of range");

  const std::size_t num_exits = exit_logits.size();
  const double tk = opts.temperature;
  const double tc = opts.soften_ce ? tk : 1.0;
  const double kl_weight = opts.alpha * (opts.scale_kl_by_t2 ? tk * tk : 1.0);

  const Tensor<T> z_e = ensemble_logits(exit_logits);
  const Tensor<T> log_qe = log_softmax(z_e, tk);

  LossResult<T> r;
  r.ce.assign(num_exits, 0.0);
  r.kl.assign(num_exits, 0.0);
  if (compute_grad) r.grad.assign(num_exits, Tensor<T>(exit_logits.front().shape()));
  // Sum over exits of (q_i - q_E), needed when the teacher is not detached.
  std::vector<double> teacher_back(compute_grad && !opts.detach_teacher ? n * c : 0, 0.0);

  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t j = 0; j < num_exits; ++j) {
    const auto& z = exit_logits[j];
    if (!z.same_shape(exit_logits.front())) fail(ErrorKind::shape_mismatch, "exit logits differ in shape");
    const Tensor<T> log_p = log_softmax(z, tc);
    const Tensor<T> log_q = log_softmax(z, tk);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t y = static_cast<std::size_t>(labels[i]);
      r.ce[j] -= static_cast<double>(log_p[i * c + y]) * inv_n;
      double kl = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double lq = log_q[i * c + k];
        kl += std::exp(lq) * (lq - static_cast<double>(log_qe[i * c + k]));
      }
      r.kl[j] += kl * inv_n;

      if (!compute_grad) continue;
      T* g = r.grad[j].data() + i * c;
      for (std::size_t k = 0; k < c; ++k) {
        const double p = std::exp(static_cast<double>(log_p[i * c + k]));
        const double q = std::exp(static_cast<double>(log_q[i * c + k]));
        const double l = static_cast<double>(log_q[i * c + k]) - static_cast<double>(log_qe[i * c + k]);
        double d = (p - (k == y ? 1.0 : 0.0)) / tc;
        d += kl_weight * q * (l - kl) / tk;
        g[k] = static_cast<T>(d * inv_n);
        if (!teacher_back.empty()) teacher_back[i * c + k] += q - std::exp(static_cast<double>(log_qe[i * c + k]));
      }
    }
    r.total += r.ce[j] + kl_weight * r.kl[j];
  }

  if (!teacher_back.empty()) {
    // d/dz_j of sum_i KL(q_i || q_E) through z_E = mean(z): -(sum_i (q_i - q_E)) / (T N).
    const double scale = kl_weight * inv_n / (tk * static_cast<double>(num_exits));
    for (std::size_t j = 0; j < num_exits; ++j)
      for (std::size_t k = 0; k < n * c; ++k) r.grad[j][k] -= static_cast<T>(teacher_back[k] * scale);
  }
  return r;
}

#define NFE_INSTANTIATE_LOSS(T)                                                                              \
  template Tensor<T> softmax<T>(const Tensor<T>&, double);                                                   \
  template Tensor<T> log_softmax<T>(const Tensor<T>&, double);                                               \
  template Tensor<T> ensemble_logits<T>(std::span<const Tensor<T>>);                                         \
  template Tensor<T> teacher_signal<T>(const Tensor<T>&, double);                                            \
  template LossResult<T> nfe_loss<T>(std::span<const Tensor<T>>, std::span<const int>, const LossOptions&, bool);

NFE_INSTANTIATE_LOSS(float)
NFE_INSTANTIATE_LOSS(double)

}  // namespace nfe
