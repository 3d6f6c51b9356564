// SPDX-License-Identifier: Apache-2.0
#include "nfe/model.hpp"

#include "nfe/log.hpp"

namespace nfe {

template <typename T>
Tensor<T> masked(const Tensor<T>& w, const Mask& m) {
  if (!w.same_shape(m))
    fail(ErrorKind::shape_mismatch, "mask " + to_string(m.shape()) + " does not fit weight " + to_string(w.shape()));
  Tensor<T> out(w.shape());
  for (std::size_t k = 0; k < w.size(); ++k) out[k] = m[k] ? w[k] : T(0);
  return out;
}

template <typename T>
std::vector<ParamRef<T>> parameters(MultiExitModel<T>& model) {
  std::vector<ParamRef<T>> out;
  if (model.spec.has_stem()) {
    out.push_back({"stem.conv", &model.stem.conv, nullptr});
    if (model.spec.batch_norm) {
      out.push_back({"stem.bn.gamma", &model.stem.norm.gamma, nullptr});
      out.push_back({"stem.bn.beta", &model.stem.norm.beta, nullptr});
    }
  }
  for (std::size_t i = 0; i < model.stage_weights.size(); ++i)
    for (std::size_t l = 0; l < model.stage_weights[i].size(); ++l)
      out.push_back({"stage" + std::to_string(i + 1) + ".w" + std::to_string(l), &model.stage_weights[i][l],
                     &model.masks.pai_masks[i][l]});
  for (std::size_t n = 0; n < model.nodes.size(); ++n) {
    const std::string prefix = "node" + std::to_string(n);
    for (std::size_t b = 0; b < model.nodes[n].blocks.size(); ++b) {
      auto& blk = model.nodes[n].blocks[b];
      const std::string bp = prefix + ".block" + std::to_string(b);
      for (std::size_t c = 0; c < blk.norms.size(); ++c) {
        out.push_back({bp + ".bn" + std::to_string(c) + ".gamma", &blk.norms[c].gamma, nullptr});
        out.push_back({bp + ".bn" + std::to_string(c) + ".beta", &blk.norms[c].beta, nullptr});
      }
      if (blk.has_shortcut) {
        out.push_back({bp + ".shortcut", &blk.shortcut, nullptr});
        if (model.spec.batch_norm) {
          out.push_back({bp + ".shortcut_bn.gamma", &blk.shortcut_norm.gamma, nullptr});
          out.push_back({bp + ".shortcut_bn.beta", &blk.shortcut_norm.beta, nullptr});
        }
      }
    }
  }
  for (std::size_t j = 0; j < model.heads.size(); ++j) {
    out.push_back({"head" + std::to_string(j + 1) + ".weight", &model.heads[j].weight, nullptr});
    out.push_back({"head" + std::to_string(j + 1) + ".bias", &model.heads[j].bias, nullptr});
  }
  return out;
}

namespace {

template <typename T>
std::size_t state_params(const StageState<T>& s) {
  std::size_t n = 0;
  for (const auto& b : s.blocks) {
    for (const auto& bn : b.norms) n += 2 * bn.channels();
    if (b.has_shortcut) {
      n += b.shortcut.value.size();
      if (!b.shortcut_norm.gamma.value.empty()) n += 2 * b.shortcut_norm.channels();
    }
  }
  return n;
}

template <typename T>
std::size_t shared_params(const BackboneSpec& spec, const Stem<T>& stem,
                          const std::vector<std::vector<Param<T>>>& stage_weights) {
  std::size_t n = 0;
  if (spec.has_stem()) {
    n += stem.conv.value.size();
    if (spec.batch_norm) n += 2 * stem.norm.channels();
  }
  for (const auto& s : stage_weights)
    for (const auto& p : s) n += p.value.size();
  return n;
}

}  // namespace

template <typename T>
std::size_t parameter_count(const MultiExitModel<T>& model) {
  std::size_t n = shared_params(model.spec, model.stem, model.stage_weights);
  for (const auto& s : model.nodes) n += state_params(s);
  for (const auto& h : model.heads) n += h.weight.value.size() + h.bias.value.size();
  return n;
}

template <typename T>
std::size_t parameter_count(const BackboneWeights<T>& net) {
  std::size_t n = shared_params(net.spec, net.stem, net.stage_weights);
  for (const auto& s : net.stage_states) n += state_params(s);
  return n + net.head.weight.value.size() + net.head.bias.value.size();
}

template <typename T>
void zero_grad(MultiExitModel<T>& model) {
  for (auto& r : parameters(model)) r.param->zero_grad();
}

template <typename T>
void enforce_masks(MultiExitModel<T>& model) {
  for (std::size_t i = 0; i < model.stage_weights.size(); ++i)
    for (std::size_t l = 0; l < model.stage_weights[i].size(); ++l) {
      auto& w = model.stage_weights[i][l].value;
      const auto& p = model.masks.pai_masks[i][l];
      for (std::size_t k = 0; k < w.size(); ++k)
        if (!p[k]) w[k] = T(0);
    }
}

template <typename T>
MultiExitModel<T> fission_transform(const BackboneWeights<T>& backbone, const FissionPlan& plan,
                                    const GroupMaskSet& masks, Rng& head_rng) {
  plan.validate();
  const auto& spec = backbone.spec;
  if (plan.num_stages != spec.num_stages())
    fail(ErrorKind::shape_mismatch, "plan has " + std::to_string(plan.num_stages) + " stages, backbone has " +
                                        std::to_string(spec.num_stages()));
  if (masks.num_stages() != plan.num_stages) fail(ErrorKind::shape_mismatch, "mask set does not cover every stage");
  for (int i = 1; i <= plan.num_stages; ++i) {
    const auto shapes = spec.stage_weight_shapes(i);
    const auto idx = static_cast<std::size_t>(i - 1);
    if (shapes_of(masks.pai_masks[idx]) != shapes)
      fail(ErrorKind::shape_mismatch, "pruning mask shapes do not match stage " + std::to_string(i));
    if (static_cast<int>(masks.group_masks[idx].size()) != plan.groups(i))
      fail(ErrorKind::shape_mismatch, "stage " + std::to_string(i) + " has " +
                                          std::to_string(masks.group_masks[idx].size()) + " group masks, plan expects " +
                                          std::to_string(plan.groups(i)));
    for (const auto& g : masks.group_masks[idx])
      if (shapes_of(g) != shapes)
        fail(ErrorKind::shape_mismatch, "group mask shapes do not match stage " + std::to_string(i));
  }
  masks.verify();
  check_live_paths(plan, masks);

  MultiExitModel<T> model;
  model.spec = spec;
  model.plan = plan;
  model.masks = masks;
  model.dag = build_execution_dag(plan);
  model.stem = backbone.stem;
  model.stage_weights = backbone.stage_weights;
  for (const auto& node : model.dag.nodes)
    model.nodes.push_back(backbone.stage_states[static_cast<std::size_t>(node.stage - 1)]);
  model.heads.push_back(backbone.head);
  for (int j = 2; j <= plan.num_exits; ++j)
    model.heads.push_back(init_head<T>(spec.feature_channels(), spec.num_classes, head_rng));
  enforce_masks(model);
  zero_grad(model);
  return model;
}

template <typename T>
const std::vector<const Tensor<T>*>& Executor<T>::effective_weights(int stage, int group) {
  const auto key = std::make_pair(stage, group);
  auto it = eff_ptrs_.find(key);
  if (it != eff_ptrs_.end()) return it->second;
  const auto& weights = model_->stage_weights[static_cast<std::size_t>(stage - 1)];
  const auto& mask = model_->masks.group(stage, group);
  auto& store = eff_storage_[key];
  store.clear();
  for (std::size_t l = 0; l < weights.size(); ++l) store.push_back(masked(weights[l].value, mask[l]));
  auto& ptrs = eff_ptrs_[key];
  for (const auto& t : store) ptrs.push_back(&t);
  return ptrs;
}

template <typename T>
const std::vector<Tensor<T>>& Executor<T>::forward(const Tensor<T>& x, Mode mode, bool update_stats) {
  auto& m = *model_;
  if (x.rank() != 4 || x.dim(1) != m.spec.in_channels || x.dim(2) != m.spec.image_size ||
      x.dim(3) != m.spec.image_size)
    fail(ErrorKind::shape_mismatch, "input " + to_string(x.shape()) + " does not match the stem");
  mode_ = mode;
  // Weights may have changed since the previous pass.
  eff_storage_.clear();
  eff_ptrs_.clear();

  const Tensor<T>& trunk = stem_forward(m.spec, m.stem, x, mode, update_stats, stem_cache_);
  node_caches_.resize(m.dag.size());
  for (std::size_t n = 0; n < m.dag.size(); ++n) {
    const auto& node = m.dag.nodes[n];
    const Tensor<T>& in = node.lineage < 0 ? trunk : node_caches_[static_cast<std::size_t>(node.lineage)].output();
    stage_forward<T>(m.spec, node.stage, effective_weights(node.stage, node.group), m.nodes[n], in, mode,
                     update_stats, node_caches_[n]);
  }
  logits_.resize(static_cast<std::size_t>(m.plan.num_exits));
  head_caches_.resize(logits_.size());
  for (std::size_t j = 0; j < logits_.size(); ++j)
    head_forward(m.heads[j], node_caches_[static_cast<std::size_t>(m.dag.exit_heads[j])].output(), logits_[j],
                 head_caches_[j]);
  return logits_;
}

template <typename T>
void Executor<T>::backward(std::span<const Tensor<T>> dlogits) {
  auto& m = *model_;
  require(mode_ == Mode::train, "backward requires a train-mode forward pass");
  require(dlogits.size() == static_cast<std::size_t>(m.plan.num_exits), "one logit gradient per exit is required");

  std::vector<Tensor<T>> dnode(m.dag.size());
  std::vector<bool> has_grad(m.dag.size(), false);
  auto accumulate = [&](std::size_t n, Tensor<T>&& g) {
    if (!has_grad[n]) {
      dnode[n] = std::move(g);
      has_grad[n] = true;
    } else {
      add_inplace(dnode[n], g);
    }
  };

  for (std::size_t j = 0; j < dlogits.size(); ++j) {
    Tensor<T> dx;
    head_backward(m.heads[j], head_caches_[j], dlogits[j], dx);
    accumulate(static_cast<std::size_t>(m.dag.exit_heads[j]), std::move(dx));
  }

  Tensor<T> dtrunk;
  bool trunk_has_grad = false;
  for (std::size_t n = m.dag.size(); n-- > 0;) {
    if (!has_grad[n]) continue;
    const auto& node = m.dag.nodes[n];
    const auto& eff = effective_weights(node.stage, node.group);
    std::vector<Tensor<T>> dweights;
    for (const auto* w : eff) dweights.emplace_back(w->shape());
    Tensor<T> dx;
    stage_backward<T>(m.spec, node.stage, eff, m.nodes[n], node_caches_[n], dnode[n], dweights, dx);

    // Fold the effective-weight gradient back onto the shared tensor; masked
    // positions receive nothing.
    const auto& mask = m.masks.group(node.stage, node.group);
    auto& shared = m.stage_weights[static_cast<std::size_t>(node.stage - 1)];
    for (std::size_t l = 0; l < shared.size(); ++l)
      for (std::size_t k = 0; k < dweights[l].size(); ++k)
        if (mask[l][k]) shared[l].grad[k] += dweights[l][k];

    if (node.lineage < 0) {
      if (!trunk_has_grad) {
        dtrunk = std::move(dx);
        trunk_has_grad = true;
      } else {
        add_inplace(dtrunk, dx);
      }
    } else {
      accumulate(static_cast<std::size_t>(node.lineage), std::move(dx));
    }
    dnode[n] = Tensor<T>();
  }
  if (trunk_has_grad) stem_backward(m.spec, m.stem, stem_cache_, dtrunk);
}

template <typename T>
std::vector<Tensor<T>> forward(MultiExitModel<T>& model, const Tensor<T>& x) {
  Executor<T> exec(model);
  return exec.forward(x, Mode::eval, false);
}

namespace {

struct StageCost {
  double conv = 0;   // groupable conv MACs
  double other = 0;  // normalisation and shortcut MACs
};

template <typename T>
StageCost stage_cost(const BackboneSpec& spec, int stage, const StageMask* group_mask) {
  StageCost c;
  const std::size_t in_size = spec.stage_in_size(stage);
  std::size_t size = in_size;
  for (std::size_t l = 0; l < spec.stage_layers(stage); ++l) {
    const ConvGeom g = spec.stage_conv(stage, l);
    size = g.out_size(size);
    const double positions = static_cast<double>(size * size);
    const double weights = group_mask ? static_cast<double>(count_ones((*group_mask)[l]))
                                      : static_cast<double>(numel(g.weight_shape()));
    c.conv += weights * positions;
    if (spec.batch_norm) c.other += static_cast<double>(g.out_channels) * positions;
  }
  const auto& s = spec.stages[static_cast<std::size_t>(stage - 1)];
  for (int b = 0; b < s.blocks; ++b)
    if (spec.block_has_shortcut(stage, b)) {
      const ConvGeom g = spec.shortcut_conv(stage, b);
      const std::size_t out = g.out_size(in_size);
      const double positions = static_cast<double>(out * out);
      c.other += static_cast<double>(numel(g.weight_shape())) * positions;
      if (spec.batch_norm) c.other += static_cast<double>(g.out_channels) * positions;
    }
  return c;
}

double stem_cost(const BackboneSpec& spec) {
  if (!spec.has_stem()) return 0;
  const ConvGeom g = spec.stem_conv();
  const std::size_t out = g.out_size(spec.image_size);
  const double positions = static_cast<double>(out * out);
  return static_cast<double>(numel(g.weight_shape())) * positions +
         (spec.batch_norm ? static_cast<double>(g.out_channels) * positions : 0.0);
}

double head_cost(const BackboneSpec& spec) {
  const std::size_t size = spec.stage_out_size(spec.num_stages());
  const double c = static_cast<double>(spec.feature_channels());
  return c * static_cast<double>(size * size) + c * static_cast<double>(spec.num_classes);
}

}  // namespace

template <typename T>
FlopsReport count_flops(const MultiExitModel<T>& model) {
  const auto& spec = model.spec;
  FlopsReport r;
  const double stem = stem_cost(spec), head = head_cost(spec);

  double dense_other = 0;
  for (int i = 1; i <= spec.num_stages(); ++i) {
    const StageCost c = stage_cost<T>(spec, i, nullptr);
    r.conv_dense += c.conv;
    dense_other += c.other;
  }
  r.dense_reference = stem + r.conv_dense + dense_other + head;

  std::vector<StageCost> node_costs;
  for (const auto& node : model.dag.nodes)
    node_costs.push_back(stage_cost<T>(spec, node.stage, &model.masks.group(node.stage, node.group)));

  r.total = stem + head * static_cast<double>(model.plan.num_exits);
  for (const auto& c : node_costs) {
    r.conv_total += c.conv;
    r.total += c.conv + c.other;
  }
  for (const auto& path : model.dag.exit_paths) {
    double e = stem + head;
    for (int n : path) e += node_costs[static_cast<std::size_t>(n)].conv + node_costs[static_cast<std::size_t>(n)].other;
    r.per_exit.push_back(e);
  }
  r.ratio = r.total / r.dense_reference;
  r.conv_ratio = r.conv_dense > 0 ? r.conv_total / r.conv_dense : 0.0;
  r.parameters = parameter_count(model);

  std::size_t dense = 0;
  if (spec.has_stem()) dense += numel(spec.stem_conv().weight_shape()) + (spec.batch_norm ? 2 * spec.stem_channels : 0);
  for (int i = 1; i <= spec.num_stages(); ++i) {
    for (const auto& s : spec.stage_weight_shapes(i)) dense += numel(s);
    if (!model.nodes.empty()) {
      // Any node of the stage has the per-stage parameter layout.
      for (std::size_t n = 0; n < model.dag.size(); ++n)
        if (model.dag.nodes[n].stage == i) {
          dense += state_params(model.nodes[n]);
          break;
        }
    }
  }
  dense += spec.feature_channels() * spec.num_classes + spec.num_classes;
  r.dense_parameters = dense;
  return r;
}

#define NFE_INSTANTIATE_MODEL(T)                                                                                    \
  template Tensor<T> masked<T>(const Tensor<T>&, const Mask&);                                                      \
  template std::vector<ParamRef<T>> parameters<T>(MultiExitModel<T>&);                                              \
  template std::size_t parameter_count<T>(const MultiExitModel<T>&);                                                \
  template std::size_t parameter_count<T>(const BackboneWeights<T>&);                                               \
  template void zero_grad<T>(MultiExitModel<T>&);                                                                   \
  template void enforce_masks<T>(MultiExitModel<T>&);                                                               \
  template MultiExitModel<T> fission_transform<T>(const BackboneWeights<T>&, const FissionPlan&, const GroupMaskSet&, \
                                                  Rng&);                                                            \
  template class Executor<T>;                                                                                       \
  template std::vector<Tensor<T>> forward<T>(MultiExitModel<T>&, const Tensor<T>&);                                 \
  template FlopsReport count_flops<T>(const MultiExitModel<T>&);

NFE_INSTANTIATE_MODEL(float)
NFE_INSTANTIATE_MODEL(double)

}  // namespace nfe
