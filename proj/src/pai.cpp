// SPDX-License-Identifier: Apache-2.0
#include "nfe/pai.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nfe/log.hpp"
#include "nfe/loss.hpp"
#include "nfe/model.hpp"

namespace nfe {

const char* to_string(PaiMethod m) noexcept {
  switch (m) {
    case PaiMethod::none: return "none";
    case PaiMethod::snip: return "snip";
    case PaiMethod::erk: return "erk";
  }
  return "?";
}

PaiMethod parse_pai_method(const std::string& s) {
  if (s == "none") return PaiMethod::none;
  if (s == "snip") return PaiMethod::snip;
  if (s == "erk") return PaiMethod::erk;
  fail(ErrorKind::invalid_argument, "unknown pruning method '" + s + "' (expected snip, erk or none)");
}

void PaiConfig::validate() const {
  require(sparsity >= 0.0 && sparsity < 1.0, "sparsity must lie in [0, 1)");
  require(saliency_batches >= 1, "saliency_batches must be >= 1");
  require(saliency_batch_size >= 1, "saliency_batch_size must be >= 1");
}

std::size_t keep_count(double sparsity, std::size_t prunable) {
  require(sparsity >= 0.0 && sparsity < 1.0, "sparsity must lie in [0, 1)");
  const double x = (1.0 - sparsity) * static_cast<double>(prunable);
  const double r = std::round(x);
  const double k = std::abs(x - r) <= 1e-9 * std::max(1.0, x) ? r : std::ceil(x);
  return std::min(prunable, static_cast<std::size_t>(k));
}

namespace {

bool is_excluded(std::span<const bool> excluded, std::size_t i) { return i < excluded.size() && excluded[i]; }

void check_exclusions(std::span<const bool> excluded, std::size_t layers) {
  require(excluded.empty() || excluded.size() == layers, "exclusion flags must match the layer count");
}

double erk_score(const Shape& s) {
  if (s.size() == 4) {
    const double o = static_cast<double>(s[0]), i = static_cast<double>(s[1]);
    const double k = static_cast<double>(s[2] * s[3]);
    return (i + o + k) / (i * o * k);
  }
  if (s.size() == 2) {
    const double o = static_cast<double>(s[0]), i = static_cast<double>(s[1]);
    return (i + o) / (i * o);
  }
  fail(ErrorKind::shape_mismatch, "ERK expects rank-2 or rank-4 weights, got " + to_string(s));
}

}  // namespace

template <typename T>
std::vector<Mask> snip_mask(std::span<const Tensor<T>* const> weights, std::span<const Tensor<T>* const> grads,
                            double sparsity, std::span<const bool> excluded) {
  require(sparsity >= 0.0 && sparsity < 1.0, "sparsity must lie in [0, 1)");
  if (grads.empty() || grads.size() != weights.size())
    fail(ErrorKind::invalid_argument, "SNIP needs one gradient tensor per weight tensor");
  check_exclusions(excluded, weights.size());

  struct Entry {
    double saliency;
    double magnitude;
    std::size_t flat;
  };
  std::vector<Entry> entries;
  std::vector<std::size_t> offset(weights.size(), 0);
  std::size_t flat = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    check_same_shape(*grads[l], weights[l]->shape(), "snip gradient");
    offset[l] = flat;
    if (is_excluded(excluded, l)) continue;
    for (std::size_t k = 0; k < weights[l]->size(); ++k) {
      const double w = static_cast<double>((*weights[l])[k]);
      const double g = static_cast<double>((*grads[l])[k]);
      entries.push_back({std::abs(w * g), std::abs(w), flat + k});
    }
    flat += weights[l]->size();
  }

  const std::size_t keep = keep_count(sparsity, entries.size());
  auto better = [](const Entry& a, const Entry& b) {
    if (a.saliency != b.saliency) return a.saliency > b.saliency;
    if (a.magnitude != b.magnitude) return a.magnitude > b.magnitude;
    return a.flat < b.flat;
  };
  if (keep < entries.size())
    std::nth_element(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(keep), entries.end(), better);

  std::vector<Mask> out;
  for (std::size_t l = 0; l < weights.size(); ++l)
    out.emplace_back(weights[l]->shape(), static_cast<std::uint8_t>(is_excluded(excluded, l) || keep == entries.size()));
  if (keep == entries.size()) return out;
  for (std::size_t e = 0; e < keep; ++e) {
    const std::size_t f = entries[e].flat;
    std::size_t l = 0;
    while (is_excluded(excluded, l) || f >= offset[l] + weights[l]->size()) ++l;
    out[l][f - offset[l]] = 1;
  }
  return out;
}

std::vector<double> erk_densities(std::span<const Shape> shapes, double sparsity, std::span<const bool> excluded) {
  check_exclusions(excluded, shapes.size());
  std::vector<double> density(shapes.size(), 1.0);
  std::vector<double> score(shapes.size(), 0.0);
  std::vector<bool> free_layer(shapes.size(), false);
  std::size_t total = 0;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    if (is_excluded(excluded, l)) continue;
    score[l] = erk_score(shapes[l]);
    free_layer[l] = true;
    total += numel(shapes[l]);
  }
  if (sparsity == 0.0) return density;
  const double budget = static_cast<double>(keep_count(sparsity, total));
  // Solve sum_l min(1, eps * score_l) * n_l = budget by iterative clamping.
  for (;;) {
    double fixed = 0.0, weighted = 0.0;
    for (std::size_t l = 0; l < shapes.size(); ++l) {
      if (is_excluded(excluded, l)) continue;
      const double n = static_cast<double>(numel(shapes[l]));
      if (free_layer[l])
        weighted += score[l] * n;
      else
        fixed += n;
    }
    if (weighted <= 0.0) {
      if (fixed + 0.5 < budget) fail(ErrorKind::invalid_argument, "ERK budget cannot be met");
      break;
    }
    const double eps = (budget - fixed) / weighted;
    bool clamped = false;
    for (std::size_t l = 0; l < shapes.size(); ++l) {
      if (!free_layer[l]) continue;
      if (eps * score[l] > 1.0) {
        free_layer[l] = false;
        density[l] = 1.0;
        clamped = true;
      }
    }
    if (clamped) continue;
    for (std::size_t l = 0; l < shapes.size(); ++l)
      if (free_layer[l]) density[l] = eps * score[l];
    break;
  }
  return density;
}

std::vector<Mask> erk_mask(std::span<const Shape> shapes, double sparsity, Rng& rng, std::span<const bool> excluded) {
  const std::vector<double> density = erk_densities(shapes, sparsity, excluded);
  std::size_t total = 0;
  for (std::size_t l = 0; l < shapes.size(); ++l)
    if (!is_excluded(excluded, l)) total += numel(shapes[l]);
  const std::size_t budget = keep_count(sparsity, total);

  // Integer counts: floors, then largest remainders up to the exact budget.
  std::vector<std::size_t> count(shapes.size(), 0);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    if (is_excluded(excluded, l)) continue;
    const double n = static_cast<double>(numel(shapes[l]));
    const double want = std::min(n, density[l] * n);
    count[l] = static_cast<std::size_t>(std::floor(want));
    assigned += count[l];
    if (count[l] < numel(shapes[l])) remainders.emplace_back(want - std::floor(want), l);
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < budget; r = (r + 1) % std::max<std::size_t>(1, remainders.size())) {
    if (remainders.empty()) fail(ErrorKind::invalid_argument, "ERK budget cannot be met");
    const std::size_t l = remainders[r].second;
    if (count[l] < numel(shapes[l])) {
      ++count[l];
      ++assigned;
    }
  }

  std::vector<Mask> out;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    if (is_excluded(excluded, l)) {
      out.emplace_back(shapes[l], std::uint8_t{1});
      continue;
    }
    Mask m(shapes[l], std::uint8_t{0});
    std::vector<std::size_t> pos(m.size());
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    // Partial Fisher-Yates: the first count[l] slots are a uniform sample.
    for (std::size_t i = 0; i < count[l]; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(pos.size() - i));
      std::swap(pos[i], pos[j]);
      m[pos[i]] = 1;
    }
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<StageMask> split_by_stage(std::vector<Mask> flat, const std::vector<std::vector<Shape>>& stage_shapes) {
  std::vector<StageMask> out;
  std::size_t k = 0;
  for (const auto& stage : stage_shapes) {
    StageMask sm;
    for (const auto& shape : stage) {
      require(k < flat.size(), "too few layer masks for the stage layout");
      check_same_shape(flat[k], shape, "stage mask");
      sm.push_back(std::move(flat[k++]));
    }
    out.push_back(std::move(sm));
  }
  require(k == flat.size(), "too many layer masks for the stage layout");
  return out;
}

template <typename T>
std::vector<StageMask> compute_pai_masks(const BackboneWeights<T>& net, const PaiConfig& cfg,
                                         std::span<const Batch<T>> data, Rng& rng) {
  cfg.validate();
  const auto stage_shapes = net.spec.all_stage_shapes();
  std::vector<Shape> flat_shapes;
  for (const auto& s : stage_shapes) flat_shapes.insert(flat_shapes.end(), s.begin(), s.end());

  if (cfg.method == PaiMethod::none || cfg.sparsity == 0.0) {
    std::vector<StageMask> out;
    for (const auto& s : stage_shapes) out.push_back(ones_like(s));
    return out;
  }
  if (cfg.method == PaiMethod::erk) return split_by_stage(erk_mask(flat_shapes, cfg.sparsity, rng), stage_shapes);

  if (data.empty()) fail(ErrorKind::invalid_argument, "SNIP needs at least one labelled batch");
  const int num_stages = net.spec.num_stages();
  const FissionPlan plan = default_plan(1, num_stages);
  Rng head_rng = rng.fork(0);
  MultiExitModel<T> model = fission_transform(net, plan, build_mask_set(plan, stage_shapes, 0), head_rng);
  Executor<T> exec(model);
  LossOptions opts;
  opts.alpha = 0.0;
  const std::size_t batches = std::min(data.size(), static_cast<std::size_t>(cfg.saliency_batches));
  for (std::size_t b = 0; b < batches; ++b) {
    const auto& logits = exec.forward(data[b].x, Mode::train, false);
    const auto loss = nfe_loss<T>(logits, data[b].labels, opts, true);
    exec.backward(loss.grad);
  }
  std::vector<const Tensor<T>*> w, g;
  for (const auto& stage : model.stage_weights)
    for (const auto& p : stage) {
      w.push_back(&p.value);
      g.push_back(&p.grad);
    }
  log::debug("snip: ranked " + std::to_string(w.size()) + " layers over " + std::to_string(batches) + " batches");
  return split_by_stage(snip_mask<T>(w, g, cfg.sparsity), stage_shapes);
}

template std::vector<Mask> snip_mask<float>(std::span<const Tensor<float>* const>,
                                            std::span<const Tensor<float>* const>, double, std::span<const bool>);
template std::vector<Mask> snip_mask<double>(std::span<const Tensor<double>* const>,
                                             std::span<const Tensor<double>* const>, double, std::span<const bool>);
template std::vector<StageMask> compute_pai_masks<float>(const BackboneWeights<float>&, const PaiConfig&,
                                                         std::span<const Batch<float>>, Rng&);
template std::vector<StageMask> compute_pai_masks<double>(const BackboneWeights<double>&, const PaiConfig&,
                                                          std::span<const Batch<double>>, Rng&);

}  // namespace nfe
