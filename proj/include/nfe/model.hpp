// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "nfe/backbone.hpp"
#include "nfe/fission.hpp"

namespace nfe {

/// A staged backbone rewired into N exits. Stage weights are shared tensors;
/// node (i, j) reads them through W_i * M_i^j. Each DAG node owns its own
/// normalisation and shortcut parameters; each exit owns its classifier.
template <typename T>
struct MultiExitModel {
  BackboneSpec spec;
  FissionPlan plan;
  GroupMaskSet masks;
  ExecutionDag dag;
  Stem<T> stem;
  std::vector<std::vector<Param<T>>> stage_weights;
  std::vector<StageState<T>> nodes;
  std::vector<Head<T>> heads;

  int num_exits() const noexcept { return plan.num_exits; }
};

/// A trainable tensor plus the set of positions allowed to be non-zero
/// (`keep`, null when unrestricted).
template <typename T>
struct ParamRef {
  std::string name;
  Param<T>* param = nullptr;
  const Mask* keep = nullptr;
};

template <typename T>
std::vector<ParamRef<T>> parameters(MultiExitModel<T>& model);

/// Number of scalar parameters over unique tensors (masks are not parameters).
template <typename T>
std::size_t parameter_count(const MultiExitModel<T>& model);
template <typename T>
std::size_t parameter_count(const BackboneWeights<T>& net);

template <typename T>
void zero_grad(MultiExitModel<T>& model);

/// Zeroes every stage weight outside its pruning mask.
template <typename T>
void enforce_masks(MultiExitModel<T>& model);

/// Builds the multi-exit model. Exit 1 reuses the backbone classifier; the
/// others are drawn from `head_rng`. Fails with ErrorKind::dead_exit when an
/// exit path crosses an empty group and ErrorKind::shape_mismatch when the
/// masks do not fit the stage weights.
template <typename T>
MultiExitModel<T> fission_transform(const BackboneWeights<T>& backbone, const FissionPlan& plan,
                                    const GroupMaskSet& masks, Rng& head_rng);

template <typename T>
Tensor<T> masked(const Tensor<T>& w, const Mask& m);

/// Executes the DAG once per batch: shared prefixes are computed a single
/// time. Holds the activations needed by backward().
template <typename T>
class Executor {
 public:
  explicit Executor(MultiExitModel<T>& model) : model_(&model) {}

  /// Returns one logit tensor [batch, classes] per exit. Train mode uses
  /// batch statistics and updates running estimates.
  const std::vector<Tensor<T>>& forward(const Tensor<T>& x, Mode mode, bool update_stats = true);

  /// Accumulates parameter gradients for the last train-mode forward.
  void backward(std::span<const Tensor<T>> dlogits);

  const Tensor<T>& node_output(int node) const { return node_caches_.at(static_cast<std::size_t>(node)).output(); }
  const Tensor<T>& stem_output() const { return stem_cache_.out; }
  const std::vector<Tensor<T>>& logits() const { return logits_; }

 private:
  const std::vector<const Tensor<T>*>& effective_weights(int stage, int group);

  MultiExitModel<T>* model_;
  Mode mode_ = Mode::eval;
  std::map<std::pair<int, int>, std::vector<Tensor<T>>> eff_storage_;
  std::map<std::pair<int, int>, std::vector<const Tensor<T>*>> eff_ptrs_;
  StemCache<T> stem_cache_;
  std::vector<StageCache<T>> node_caches_;
  std::vector<HeadCache<T>> head_caches_;
  std::vector<Tensor<T>> logits_;
};

/// Eval-mode convenience wrapper.
template <typename T>
std::vector<Tensor<T>> forward(MultiExitModel<T>& model, const Tensor<T>& x);

/// Multiply-accumulate counts for one input image.
struct FlopsReport {
  std::vector<double> per_exit;   // cost of running exit j alone
  double total = 0;               // DAG cost: each node counted once, plus all heads
  double dense_reference = 0;     // dense single backbone with one head
  double conv_total = 0;          // masked groupable convolutions over DAG nodes
  double conv_dense = 0;          // dense groupable convolutions of the backbone
  double ratio = 0;               // total / dense_reference
  double conv_ratio = 0;          // conv_total / conv_dense
  std::size_t parameters = 0;
  std::size_t dense_parameters = 0;
};

template <typename T>
FlopsReport count_flops(const MultiExitModel<T>& model);

}  // namespace nfe
