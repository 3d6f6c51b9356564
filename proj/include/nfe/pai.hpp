// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "nfe/backbone.hpp"
#include "nfe/dataset.hpp"
#include "nfe/fission.hpp"

namespace nfe {

enum class PaiMethod { none, snip, erk };

const char* to_string(PaiMethod m) noexcept;
PaiMethod parse_pai_method(const std::string& s);

struct PaiConfig {
  PaiMethod method = PaiMethod::none;
  double sparsity = 0.0;
  int saliency_batches = 1;
  std::size_t saliency_batch_size = 128;

  void validate() const;
};

/// Number of weights kept out of `prunable` at sparsity S: ceil((1 - S) * P).
/// Products within 1e-9 of an integer are snapped first so that, e.g.,
/// S = 0.7 over 10 weights keeps 3.
std::size_t keep_count(double sparsity, std::size_t prunable);

/// Global SNIP ranking over layers. Saliency is |w * g|; ties go to larger
/// |w|, then to the lower position in the concatenated flat order. Layers
/// flagged in `excluded` receive all-ones masks and do not enter the ranking.
template <typename T>
std::vector<Mask> snip_mask(std::span<const Tensor<T>* const> weights, std::span<const Tensor<T>* const> grads,
                            double sparsity, std::span<const bool> excluded = {});

/// Per-layer densities of the Erdos-Renyi-Kernel rule: density is
/// proportional to (fan_in + fan_out + kernel_area) / (fan_in * fan_out *
/// kernel_area), scaled to meet the global budget; layers whose density
/// would exceed 1 are clamped and the remainder redistributed.
std::vector<double> erk_densities(std::span<const Shape> shapes, double sparsity, std::span<const bool> excluded = {});

/// ERK masks with exactly keep_count(S, P) ones over non-excluded layers;
/// positions are uniform at random within each layer.
std::vector<Mask> erk_mask(std::span<const Shape> shapes, double sparsity, Rng& rng,
                           std::span<const bool> excluded = {});

/// Per-stage PaI masks over the groupable stage weights of `net`. Stems,
/// shortcut projections and classifiers never enter the budget. SNIP
/// gradients are the cross-entropy gradients of the unmodified network,
/// accumulated over `saliency_batches` batches of `data`.
template <typename T>
std::vector<StageMask> compute_pai_masks(const BackboneWeights<T>& net, const PaiConfig& cfg,
                                         std::span<const Batch<T>> data, Rng& rng);

/// Regroups a flat per-layer list into stages following `net` layout.
std::vector<StageMask> split_by_stage(std::vector<Mask> flat, const std::vector<std::vector<Shape>>& stage_shapes);

}  // namespace nfe
