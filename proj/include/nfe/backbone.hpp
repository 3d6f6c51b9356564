// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "nfe/layers.hpp"
#include "nfe/rng.hpp"

namespace nfe {

enum class BlockKind { residual, plain };

struct StageSpec {
  std::size_t channels = 16;
  int blocks = 1;
  std::size_t stride = 1;

  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

/// Architecture of a staged backbone. Stage i's groupable weight set W_i is
/// the list of its blocks' main-path convolutions; shortcut convolutions,
/// normalisation, the stem and the classifier are never grouped.
struct BackboneSpec {
  std::string family = "custom";
  std::size_t in_channels = 3;
  std::size_t image_size = 32;
  std::size_t num_classes = 10;
  std::size_t stem_channels = 16;  // 0 disables the stem
  std::size_t stem_kernel = 3;
  BlockKind block = BlockKind::residual;
  std::size_t kernel = 3;
  bool batch_norm = true;
  bool relu = true;
  std::vector<StageSpec> stages;

  void validate() const;
  int num_stages() const noexcept { return static_cast<int>(stages.size()); }
  bool has_stem() const noexcept { return stem_channels > 0; }
  int convs_per_block() const noexcept { return block == BlockKind::residual ? 2 : 1; }

  std::size_t stage_in_channels(int stage) const;
  std::size_t stage_in_size(int stage) const;
  std::size_t stage_out_size(int stage) const;
  std::size_t feature_channels() const { return stages.back().channels; }

  /// Geometry of main-path convolution `layer` (0-based, flat within the stage).
  ConvGeom stage_conv(int stage, std::size_t layer) const;
  std::size_t stage_layers(int stage) const;
  std::vector<Shape> stage_weight_shapes(int stage) const;
  std::vector<std::vector<Shape>> all_stage_shapes() const;

  bool block_has_shortcut(int stage, int block) const;
  ConvGeom shortcut_conv(int stage, int block) const;
  ConvGeom stem_conv() const;

  friend bool operator==(const BackboneSpec&, const BackboneSpec&) = default;
};

/// CIFAR-style ResNet-8 family: three stages of `blocks` residual blocks.
BackboneSpec small_resnet(std::size_t num_classes, std::size_t width = 16, int blocks = 1);
/// ResNet-18 layout with the CIFAR stem (3x3, stride 1, no max-pool).
BackboneSpec mid_resnet(std::size_t num_classes, std::size_t width = 64, int blocks = 2);
/// WRN-depth-widen layout without dropout: three stages of (depth-4)/6 blocks.
BackboneSpec wide_resnet_like(std::size_t num_classes, int depth = 28, int widen = 10);
/// Dispatch on "small-resnet", "mid-resnet" or "wide-resnet-like". `depth` and
/// `width` of 0 select the family default.
BackboneSpec make_backbone(const std::string& family, std::size_t num_classes, int depth = 0, int width = 0);

template <typename T>
struct BlockState {
  std::vector<BatchNorm<T>> norms;  // one per main-path conv (empty without BN)
  bool has_shortcut = false;
  Param<T> shortcut;
  BatchNorm<T> shortcut_norm;
};

/// Everything a stage owns besides its groupable weights. Each DAG node
/// carries its own copy.
template <typename T>
struct StageState {
  std::vector<BlockState<T>> blocks;
};

template <typename T>
struct Stem {
  Param<T> conv;
  BatchNorm<T> norm;
};

template <typename T>
struct Head {
  Param<T> weight;
  Param<T> bias;
};

template <typename T>
struct BackboneWeights {
  BackboneSpec spec;
  Stem<T> stem;
  std::vector<std::vector<Param<T>>> stage_weights;
  std::vector<StageState<T>> stage_states;
  Head<T> head;
};

/// He-normal (fan-out) convolutions, unit/zero BN, uniform(+-1/sqrt(in)) head.
template <typename T>
BackboneWeights<T> init_backbone(const BackboneSpec& spec, Rng& rng);

template <typename T>
Head<T> init_head(std::size_t in_features, std::size_t num_classes, Rng& rng);

template <typename T>
struct BlockCache {
  const Tensor<T>* input = nullptr;
  std::vector<Tensor<T>> acts;  // post-norm/activation output of each main-path conv
  std::vector<BatchNormCache<T>> norms;
  BatchNormCache<T> shortcut_norm;
  Tensor<T> shortcut_out;
  Tensor<T> out;
};

template <typename T>
struct StageCache {
  std::vector<BlockCache<T>> blocks;
  const Tensor<T>& output() const { return blocks.back().out; }
};

/// Runs one stage with the given (already masked) weights. The cache keeps
/// a pointer to `x`, which must outlive the backward call.
template <typename T>
const Tensor<T>& stage_forward(const BackboneSpec& spec, int stage, std::span<const Tensor<T>* const> weights,
                               StageState<T>& state, const Tensor<T>& x, Mode mode, bool update_stats,
                               StageCache<T>& cache);

/// Accumulates weight gradients into `dweights` (one per layer) and norm /
/// shortcut gradients into `state`; writes the input gradient into `dx`.
template <typename T>
void stage_backward(const BackboneSpec& spec, int stage, std::span<const Tensor<T>* const> weights,
                    StageState<T>& state, const StageCache<T>& cache, const Tensor<T>& dout,
                    std::vector<Tensor<T>>& dweights, Tensor<T>& dx);

template <typename T>
struct StemCache {
  const Tensor<T>* input = nullptr;
  BatchNormCache<T> norm;
  Tensor<T> out;
};

template <typename T>
const Tensor<T>& stem_forward(const BackboneSpec& spec, Stem<T>& stem, const Tensor<T>& x, Mode mode,
                              bool update_stats, StemCache<T>& cache);
template <typename T>
void stem_backward(const BackboneSpec& spec, Stem<T>& stem, const StemCache<T>& cache, const Tensor<T>& dout);

template <typename T>
struct HeadCache {
  const Tensor<T>* input = nullptr;
  Tensor<T> pooled;
};

template <typename T>
void head_forward(const Head<T>& head, const Tensor<T>& x, Tensor<T>& logits, HeadCache<T>& cache);
template <typename T>
void head_backward(Head<T>& head, const HeadCache<T>& cache, const Tensor<T>& dlogits, Tensor<T>& dx);

/// Plain single-exit forward of the unmodified backbone. Running statistics
/// are left untouched in both modes.
template <typename T>
Tensor<T> backbone_forward(BackboneWeights<T>& net, const Tensor<T>& x, Mode mode);

}  // namespace nfe
