// SPDX-License-Identifier: Apache-2.0
#include "nfe/backbone.hpp"

#include <cmath>

namespace nfe {

void BackboneSpec::validate() const {
  require(!stages.empty(), "backbone needs at least one stage");
  require(in_channels > 0 && image_size > 0 && num_classes > 1, "backbone input/classes must be positive");
  require(kernel % 2 == 1, "stage kernel size must be odd");
  require(stem_channels == 0 || stem_kernel % 2 == 1, "stem kernel size must be odd");
  for (const auto& s : stages) require(s.channels > 0 && s.blocks >= 1 && s.stride >= 1, "invalid stage spec");
  std::size_t size = image_size;
  for (const auto& s : stages) {
    size = (size + 2 * (kernel / 2) - kernel) / s.stride + 1;
    require(size >= 1, "input resolution too small for the stage strides");
  }
}

std::size_t BackboneSpec::stage_in_channels(int stage) const {
  if (stage == 1) return has_stem() ? stem_channels : in_channels;
  return stages.at(static_cast<std::size_t>(stage - 2)).channels;
}

std::size_t BackboneSpec::stage_in_size(int stage) const {
  std::size_t size = image_size;
  for (int i = 1; i < stage; ++i) size = stage_out_size(i);
  return size;
}

std::size_t BackboneSpec::stage_out_size(int stage) const {
  const auto& s = stages.at(static_cast<std::size_t>(stage - 1));
  const std::size_t in = stage_in_size(stage);
  return (in + 2 * (kernel / 2) - kernel) / s.stride + 1;
}

std::size_t BackboneSpec::stage_layers(int stage) const {
  return static_cast<std::size_t>(stages.at(static_cast<std::size_t>(stage - 1)).blocks * convs_per_block());
}

ConvGeom BackboneSpec::stage_conv(int stage, std::size_t layer) const {
  const auto& s = stages.at(static_cast<std::size_t>(stage - 1));
  const std::size_t cpb = static_cast<std::size_t>(convs_per_block());
  const std::size_t block = layer / cpb, pos = layer % cpb;
  ConvGeom g;
  g.in_channels = (pos == 0 && block == 0) ? stage_in_channels(stage) : s.channels;
  g.out_channels = s.channels;
  g.kernel = kernel;
  g.pad = kernel / 2;
  g.stride = (pos == 0 && block == 0) ? s.stride : 1;
  return g;
}

std::vector<Shape> BackboneSpec::stage_weight_shapes(int stage) const {
  std::vector<Shape> out;
  for (std::size_t l = 0; l < stage_layers(stage); ++l) out.push_back(stage_conv(stage, l).weight_shape());
  return out;
}

std::vector<std::vector<Shape>> BackboneSpec::all_stage_shapes() const {
  std::vector<std::vector<Shape>> out;
  for (int i = 1; i <= num_stages(); ++i) out.push_back(stage_weight_shapes(i));
  return out;
}

bool BackboneSpec::block_has_shortcut(int stage, int block) const {
  if (this->block != BlockKind::residual || block != 0) return false;
  const auto& s = stages.at(static_cast<std::size_t>(stage - 1));
  return s.stride != 1 || stage_in_channels(stage) != s.channels;
}

ConvGeom BackboneSpec::shortcut_conv(int stage, int /*block*/) const {
  const auto& s = stages.at(static_cast<std::size_t>(stage - 1));
  return ConvGeom{stage_in_channels(stage), s.channels, 1, s.stride, 0};
}

ConvGeom BackboneSpec::stem_conv() const {
  return ConvGeom{in_channels, stem_channels, stem_kernel, 1, stem_kernel / 2};
}

BackboneSpec small_resnet(std::size_t num_classes, std::size_t width, int blocks) {
  BackboneSpec s;
  s.family = "small-resnet";
  s.num_classes = num_classes;
  s.stem_channels = width;
  s.stages = {{width, blocks, 1}, {2 * width, blocks, 2}, {4 * width, blocks, 2}};
  s.validate();
  return s;
}

BackboneSpec mid_resnet(std::size_t num_classes, std::size_t width, int blocks) {
  BackboneSpec s;
  s.family = "mid-resnet";
  s.num_classes = num_classes;
  s.stem_channels = width;
  s.stages = {{width, blocks, 1}, {2 * width, blocks, 2}, {4 * width, blocks, 2}, {8 * width, blocks, 2}};
  s.validate();
  return s;
}

BackboneSpec wide_resnet_like(std::size_t num_classes, int depth, int widen) {
  require(depth >= 10 && (depth - 4) % 6 == 0, "wide-resnet depth must be 6n+4");
  require(widen >= 1, "widen factor must be >= 1");
  const int n = (depth - 4) / 6;
  const auto k = static_cast<std::size_t>(widen);
  BackboneSpec s;
  s.family = "wide-resnet-like";
  s.num_classes = num_classes;
  s.stem_channels = 16;
  s.stages = {{16 * k, n, 1}, {32 * k, n, 2}, {64 * k, n, 2}};
  s.validate();
  return s;
}

BackboneSpec make_backbone(const std::string& family, std::size_t num_classes, int depth, int width) {
  if (family == "small-resnet") {
    const int d = depth ? depth : 8;
    require(d >= 8 && (d - 2) % 6 == 0, "small-resnet depth must be 6n+2");
    return small_resnet(num_classes, width ? static_cast<std::size_t>(width) : 16, (d - 2) / 6);
  }
  if (family == "mid-resnet") {
    const int d = depth ? depth : 18;
    require(d >= 10 && (d - 2) % 8 == 0, "mid-resnet depth must be 8n+2");
    return mid_resnet(num_classes, width ? static_cast<std::size_t>(width) : 64, (d - 2) / 8);
  }
  if (family == "wide-resnet-like") return wide_resnet_like(num_classes, depth ? depth : 28, width ? width : 10);
  fail(ErrorKind::invalid_argument, "unknown backbone family '" + family + "'");
}

namespace {

template <typename T>
Tensor<T> he_normal(const ConvGeom& g, Rng& rng) {
  Tensor<T> w(g.weight_shape());
  const double std = std::sqrt(2.0 / static_cast<double>(g.out_channels * g.kernel * g.kernel));
  for (auto& v : w.values()) v = static_cast<T>(rng.normal() * std);
  return w;
}

}  // namespace

template <typename T>
Head<T> init_head(std::size_t in_features, std::size_t num_classes, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  Tensor<T> w({num_classes, in_features});
  for (auto& v : w.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  Tensor<T> b({num_classes});
  for (auto& v : b.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return Head<T>{Param<T>(std::move(w)), Param<T>(std::move(b))};
}

template <typename T>
BackboneWeights<T> init_backbone(const BackboneSpec& spec, Rng& rng) {
  spec.validate();
  BackboneWeights<T> net;
  net.spec = spec;
  if (spec.has_stem()) {
    net.stem.conv = Param<T>(he_normal<T>(spec.stem_conv(), rng));
    net.stem.norm = BatchNorm<T>(spec.stem_channels);
  }
  for (int i = 1; i <= spec.num_stages(); ++i) {
    std::vector<Param<T>> weights;
    for (std::size_t l = 0; l < spec.stage_layers(i); ++l) weights.emplace_back(he_normal<T>(spec.stage_conv(i, l), rng));
    net.stage_weights.push_back(std::move(weights));

    StageState<T> state;
    const auto& s = spec.stages[static_cast<std::size_t>(i - 1)];
    for (int b = 0; b < s.blocks; ++b) {
      BlockState<T> block;
      if (spec.batch_norm)
        for (int c = 0; c < spec.convs_per_block(); ++c) block.norms.emplace_back(s.channels);
      if (spec.block_has_shortcut(i, b)) {
        block.has_shortcut = true;
        block.shortcut = Param<T>(he_normal<T>(spec.shortcut_conv(i, b), rng));
        if (spec.batch_norm) block.shortcut_norm = BatchNorm<T>(s.channels);
      }
      state.blocks.push_back(std::move(block));
    }
    net.stage_states.push_back(std::move(state));
  }
  net.head = init_head<T>(spec.feature_channels(), spec.num_classes, rng);
  return net;
}

template <typename T>
const Tensor<T>& stage_forward(const BackboneSpec& spec, int stage, std::span<const Tensor<T>* const> weights,
                               StageState<T>& state, const Tensor<T>& x, Mode mode, bool update_stats,
                               StageCache<T>& cache) {
  const auto& s = spec.stages.at(static_cast<std::size_t>(stage - 1));
  if (weights.size() != spec.stage_layers(stage))
    fail(ErrorKind::shape_mismatch, "stage " + std::to_string(stage) + ": wrong number of weight tensors");
  const int cpb = spec.convs_per_block();
  cache.blocks.resize(static_cast<std::size_t>(s.blocks));

  const Tensor<T>* input = &x;
  for (int b = 0; b < s.blocks; ++b) {
    auto& bc = cache.blocks[static_cast<std::size_t>(b)];
    auto& bs = state.blocks[static_cast<std::size_t>(b)];
    bc.input = input;
    bc.acts.resize(static_cast<std::size_t>(cpb));
    bc.norms.resize(spec.batch_norm ? static_cast<std::size_t>(cpb) : 0);

    const Tensor<T>* cur = input;
    Tensor<T> tmp;
    for (int c = 0; c < cpb; ++c) {
      const std::size_t layer = static_cast<std::size_t>(b * cpb + c);
      auto& act = bc.acts[static_cast<std::size_t>(c)];
      conv2d_forward(*cur, *weights[layer], spec.stage_conv(stage, layer), spec.batch_norm ? tmp : act);
      if (spec.batch_norm)
        batchnorm_forward(tmp, bs.norms[static_cast<std::size_t>(c)], mode, update_stats, act,
                          mode == Mode::train ? &bc.norms[static_cast<std::size_t>(c)] : nullptr);
      const bool last = c == cpb - 1;
      // The residual block's final activation is applied after the skip sum.
      if (spec.relu && !(last && spec.block == BlockKind::residual)) relu_inplace(act);
      cur = &act;
    }

    if (spec.block == BlockKind::residual) {
      bc.out = bc.acts.back();
      if (bs.has_shortcut) {
        const ConvGeom sg = spec.shortcut_conv(stage, b);
        if (spec.batch_norm) {
          conv2d_forward(*input, bs.shortcut.value, sg, tmp);
          batchnorm_forward(tmp, bs.shortcut_norm, mode, update_stats, bc.shortcut_out,
                            mode == Mode::train ? &bc.shortcut_norm : nullptr);
        } else {
          conv2d_forward(*input, bs.shortcut.value, sg, bc.shortcut_out);
        }
        add_inplace(bc.out, bc.shortcut_out);
      } else {
        add_inplace(bc.out, *input);
      }
      if (spec.relu) relu_inplace(bc.out);
    } else {
      bc.out = bc.acts.back();
    }
    input = &bc.out;
  }
  return cache.output();
}

template <typename T>
void stage_backward(const BackboneSpec& spec, int stage, std::span<const Tensor<T>* const> weights,
                    StageState<T>& state, const StageCache<T>& cache, const Tensor<T>& dout,
                    std::vector<Tensor<T>>& dweights, Tensor<T>& dx) {
  const auto& s = spec.stages.at(static_cast<std::size_t>(stage - 1));
  const int cpb = spec.convs_per_block();
  if (dweights.size() != spec.stage_layers(stage))
    fail(ErrorKind::shape_mismatch, "stage_backward: wrong number of weight gradient tensors");

  Tensor<T> grad = dout;
  Tensor<T> tmp, dnext;
  for (int b = s.blocks - 1; b >= 0; --b) {
    const auto& bc = cache.blocks[static_cast<std::size_t>(b)];
    auto& bs = state.blocks[static_cast<std::size_t>(b)];

    Tensor<T> dskip;
    if (spec.block == BlockKind::residual) {
      if (spec.relu) relu_backward_inplace(bc.out, grad);
      if (bs.has_shortcut) {
        const ConvGeom sg = spec.shortcut_conv(stage, b);
        const Tensor<T>* dconv = &grad;
        if (spec.batch_norm) {
          batchnorm_backward(bc.shortcut_norm, bs.shortcut_norm, grad, tmp);
          dconv = &tmp;
        }
        conv2d_backward(*bc.input, bs.shortcut.value, sg, *dconv, &bs.shortcut.grad, &dskip);
      } else {
        dskip = grad;
      }
    }

    // `grad` is now dL/d(last main-path act) (pre-activation for residual blocks).
    for (int c = cpb - 1; c >= 0; --c) {
      const std::size_t layer = static_cast<std::size_t>(b * cpb + c);
      const bool last = c == cpb - 1;
      if (spec.relu && !(last && spec.block == BlockKind::residual))
        relu_backward_inplace(bc.acts[static_cast<std::size_t>(c)], grad);
      const Tensor<T>* dconv = &grad;
      if (spec.batch_norm) {
        batchnorm_backward(bc.norms[static_cast<std::size_t>(c)], bs.norms[static_cast<std::size_t>(c)], grad, tmp);
        dconv = &tmp;
      }
      const Tensor<T>& conv_in = c == 0 ? *bc.input : bc.acts[static_cast<std::size_t>(c - 1)];
      conv2d_backward(conv_in, *weights[layer], spec.stage_conv(stage, layer), *dconv, &dweights[layer], &dnext);
      std::swap(grad, dnext);
    }
    if (spec.block == BlockKind::residual) add_inplace(grad, dskip);
  }
  dx = std::move(grad);
}

template <typename T>
const Tensor<T>& stem_forward(const BackboneSpec& spec, Stem<T>& stem, const Tensor<T>& x, Mode mode,
                              bool update_stats, StemCache<T>& cache) {
  cache.input = &x;
  if (!spec.has_stem()) {
    cache.out = x;
    return cache.out;
  }
  if (spec.batch_norm) {
    Tensor<T> tmp;
    conv2d_forward(x, stem.conv.value, spec.stem_conv(), tmp);
    batchnorm_forward(tmp, stem.norm, mode, update_stats, cache.out, mode == Mode::train ? &cache.norm : nullptr);
  } else {
    conv2d_forward(x, stem.conv.value, spec.stem_conv(), cache.out);
  }
  if (spec.relu) relu_inplace(cache.out);
  return cache.out;
}

template <typename T>
void stem_backward(const BackboneSpec& spec, Stem<T>& stem, const StemCache<T>& cache, const Tensor<T>& dout) {
  if (!spec.has_stem()) return;
  Tensor<T> grad = dout;
  if (spec.relu) relu_backward_inplace(cache.out, grad);
  Tensor<T> tmp;
  const Tensor<T>* dconv = &grad;
  if (spec.batch_norm) {
    batchnorm_backward(cache.norm, stem.norm, grad, tmp);
    dconv = &tmp;
  }
  conv2d_backward(*cache.input, stem.conv.value, spec.stem_conv(), *dconv, &stem.conv.grad,
                  static_cast<Tensor<T>*>(nullptr));
}

template <typename T>
void head_forward(const Head<T>& head, const Tensor<T>& x, Tensor<T>& logits, HeadCache<T>& cache) {
  cache.input = &x;
  global_avg_pool_forward(x, cache.pooled);
  linear_forward(cache.pooled, head.weight.value, head.bias.value, logits);
}

template <typename T>
void head_backward(Head<T>& head, const HeadCache<T>& cache, const Tensor<T>& dlogits, Tensor<T>& dx) {
  Tensor<T> dpooled;
  linear_backward(cache.pooled, head.weight.value, dlogits, head.weight.grad, head.bias.grad, &dpooled);
  global_avg_pool_backward(cache.input->shape(), dpooled, dx);
}

template <typename T>
Tensor<T> backbone_forward(BackboneWeights<T>& net, const Tensor<T>& x, Mode mode) {
  const auto& spec = net.spec;
  if (x.rank() != 4 || x.dim(1) != spec.in_channels)
    fail(ErrorKind::shape_mismatch, "input " + to_string(x.shape()) + " does not match the stem");
  StemCache<T> stem_cache;
  const Tensor<T>* act = &stem_forward(spec, net.stem, x, mode, false, stem_cache);
  std::vector<StageCache<T>> caches(static_cast<std::size_t>(spec.num_stages()));
  for (int i = 1; i <= spec.num_stages(); ++i) {
    std::vector<const Tensor<T>*> w;
    for (const auto& p : net.stage_weights[static_cast<std::size_t>(i - 1)]) w.push_back(&p.value);
    act = &stage_forward<T>(spec, i, w, net.stage_states[static_cast<std::size_t>(i - 1)], *act, mode, false,
                            caches[static_cast<std::size_t>(i - 1)]);
  }
  Tensor<T> logits;
  HeadCache<T> head_cache;
  head_forward(net.head, *act, logits, head_cache);
  return logits;
}

#define NFE_INSTANTIATE_BACKBONE(T)                                                                                \
  template Head<T> init_head<T>(std::size_t, std::size_t, Rng&);                                                   \
  template BackboneWeights<T> init_backbone<T>(const BackboneSpec&, Rng&);                                         \
  template const Tensor<T>& stage_forward<T>(const BackboneSpec&, int, std::span<const Tensor<T>* const>,          \
                                             StageState<T>&, const Tensor<T>&, Mode, bool, StageCache<T>&);        \
  template void stage_backward<T>(const BackboneSpec&, int, std::span<const Tensor<T>* const>, StageState<T>&,     \
                                  const StageCache<T>&, const Tensor<T>&, std::vector<Tensor<T>>&, Tensor<T>&);    \
  template const Tensor<T>& stem_forward<T>(const BackboneSpec&, Stem<T>&, const Tensor<T>&, Mode, bool,           \
                                            StemCache<T>&);                                                        \
  template void stem_backward<T>(const BackboneSpec&, Stem<T>&, const StemCache<T>&, const Tensor<T>&);            \
  template void head_forward<T>(const Head<T>&, const Tensor<T>&, Tensor<T>&, HeadCache<T>&);                      \
  template void head_backward<T>(Head<T>&, const HeadCache<T>&, const Tensor<T>&, Tensor<T>&);                     \
  template Tensor<T> backbone_forward<T>(BackboneWeights<T>&, const Tensor<T>&, Mode);

NFE_INSTANTIATE_BACKBONE(float)
NFE_INSTANTIATE_BACKBONE(double)

}  // namespace nfe
