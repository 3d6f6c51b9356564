// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nfe/dataset.hpp"
#include "nfe/model.hpp"

namespace nfe {

/// Row-wise argmax of [n, C]; ties resolve to the lowest class index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& scores);

template <typename T>
struct EnsemblePrediction {
  std::vector<int> classes;
  Tensor<T> probabilities;  // softmax of the mean logits at T = 1
};

template <typename T>
EnsemblePrediction<T> ensemble_predict(std::span<const Tensor<T>> exit_logits);

double accuracy(std::span<const int> predictions, std::span<const int> labels);

/// Expected calibration error over equal-width, right-inclusive confidence
/// bins: (0, 1/B], (1/B, 2/B], ... with confidence 0 placed in the first bin.
double ece(const Tensor<double>& probabilities, std::span<const int> labels, int num_bins = 15);

/// Mean -log max(p[label], 1e-12).
double nll(const Tensor<double>& probabilities, std::span<const int> labels);

double prediction_disagreement(std::span<const int> a, std::span<const int> b);

/// Mean over rows of the cosine between matching probability rows.
double cosine_similarity(const Tensor<double>& a, const Tensor<double>& b);

struct EvalReport {
  std::vector<double> per_exit_accuracy;
  double ensemble_accuracy = 0;
  double nll = 0;
  double ece = 0;
  std::vector<std::vector<double>> pairwise_pd;
  std::vector<std::vector<double>> pairwise_cs;
  double flops_ratio = 0;
  std::size_t num_samples = 0;
  std::size_t parameters = 0;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// Metrics from precomputed exit logits (any precision).
template <typename T>
EvalReport evaluate_logits(std::span<const Tensor<T>> exit_logits, std::span<const int> labels, int ece_bins = 15);

/// Eval-mode pass over `set`, batched.
template <typename T>
EvalReport evaluate(MultiExitModel<T>& model, const ImageSet& set, const Normalization& norm,
                    std::size_t batch_size = 500, int ece_bins = 15);

/// Fixed-width table with one row per report:
/// name | exits | acc | NLL | ECE | FLOPs | mean PD | mean CS.
std::string format_table(const std::vector<std::pair<std::string, EvalReport>>& rows,
                         const std::string& provenance = {});

}  // namespace nfe
