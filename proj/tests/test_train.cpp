// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "nfe/metrics.hpp"
#include "nfe/train.hpp"
#include "test_util.hpp"

using namespace nfe;
using nfe::testing::toy_spec;

namespace {

DatasetSplits tiny_data(std::size_t train = 64) {
  DatasetDescriptor d;
  d.name = "synthetic";
  d.synthetic_train = train;
  d.synthetic_test = 32;
  d.synthetic_classes = 4;
  d.synthetic_size = 8;
  d.seed = 3;
  return ingest_dataset(d);
}

template <typename T>
MultiExitModel<T> tiny_model(int exits, std::uint64_t seed, double sparsity = 0.0, int stages = 2) {
  const BackboneSpec spec = toy_spec(stages, 4, 4);
  Rng rng(seed);
  const auto net = init_backbone<T>(spec, rng);
  const FissionPlan plan = default_plan(exits, stages);
  std::vector<StageMask> pai;
  for (const auto& shapes : spec.all_stage_shapes()) {
    StageMask m = ones_like(shapes);
    for (auto& t : m)
      for (auto& v : t.values()) v = sparsity > 0 ? rng.bernoulli(1 - sparsity) : 1;
    pai.push_back(std::move(m));
  }
  return fission_transform(net, plan, build_mask_set(plan, spec.all_stage_shapes(), seed, &pai, sparsity), rng);
}

TrainConfig quick(int epochs = 2) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.lr_initial = 0.05;
  c.lr_schedule = LrSchedule::constant;
  c.seed = 11;
  return c;
}

}  // namespace

TEST_CASE("learning-rate schedules") {
  TrainConfig c;
  CHECK(lr_at(0, c) == 0.1);
  CHECK(lr_at(74, c) == 0.1);
  CHECK(lr_at(76, c) == doctest::Approx(0.01).epsilon(1e-15));
  CHECK(lr_at(130, c) == doctest::Approx(0.001).epsilon(1e-15));
  CHECK(lr_at(199, c) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK_THROWS_AS(lr_at(200, c), Error);

  c.lr_schedule = LrSchedule::half_then_linear;
  CHECK(lr_at(0, c) == 0.1);
  CHECK(lr_at(99, c) == 0.1);
  CHECK(lr_at(100, c) == doctest::Approx(0.01));
  CHECK(lr_at(140, c) == doctest::Approx(0.0055));
  CHECK(lr_at(180, c) == doctest::Approx(0.001));
  CHECK(lr_at(199, c) == doctest::Approx(0.001));
  for (int e = 101; e < 200; ++e) CHECK(lr_at(e, c) <= lr_at(e - 1, c));

  CHECK(parse_schedule("half-then-linear") == LrSchedule::half_then_linear);
  CHECK_THROWS_AS(parse_schedule("cosine"), Error);
}

TEST_CASE("config text and JSON round trips") {
  TrainConfig c = quick(7);
  c.alpha = 0.25;
  c.temperature = 4;
  c.milestones = {3, 5};
  c.soften_ce = true;
  const TrainConfig back = parse_config(format_config(c));
  CHECK(format_config(back) == format_config(c));
  CHECK(back.milestones == std::vector<int>{3, 5});
  const TrainConfig j = train_config_from_json(to_json(c));
  CHECK(format_config(j) == format_config(c));

  const TrainConfig partial = parse_config("# comment\nalpha = 2\n\nepochs=5\n");
  CHECK(partial.alpha == 2);
  CHECK(partial.epochs == 5);
  CHECK(partial.temperature == 3);

  try {
    (void)parse_config("learning_rate_typo = 0.1\n");
    FAIL("expected a format error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::format);
  }
  CHECK_THROWS_AS(parse_config("alpha = fast\n"), Error);

  TrainConfig cut = quick();
  cut.cutmix = true;
  CHECK_THROWS_AS(cut.validate(), Error);
  TrainConfig neg = quick();
  neg.temperature = 0;
  CHECK_THROWS_AS(neg.validate(), Error);
}

TEST_CASE("training is deterministic for a fixed seed") {
  const auto data = tiny_data();
  auto a = tiny_model<float>(2, 5);
  auto b = tiny_model<float>(2, 5);
  const auto ra = train(a, data, quick());
  const auto rb = train(b, data, quick());
  CHECK(ra.step_losses == rb.step_losses);
  CHECK(ra.step_losses.size() == 2 * 4);
  const auto pa = parameters(a), pb = parameters(b);
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].param->value == pb[i].param->value);
}

TEST_CASE("single exit: distillation weight has no effect") {
  const auto data = tiny_data();
  auto a = tiny_model<double>(1, 8);
  auto b = tiny_model<double>(1, 8);
  TrainConfig ca = quick(), cb = quick();
  ca.alpha = 0;
  cb.alpha = 5;
  const auto ra = train(a, data, ca);
  const auto rb = train(b, data, cb);
  CHECK(ra.step_losses == rb.step_losses);
  for (const auto& e : rb.epochs) CHECK(e.exit_kl[0] == 0.0);
}

TEST_CASE("single exit with alpha = 0 matches plain cross-entropy SGD") {
  const auto data = tiny_data(32);
  auto model = tiny_model<double>(1, 9);
  auto ref = tiny_model<double>(1, 9);
  TrainConfig cfg = quick(1);
  cfg.alpha = 0;
  cfg.augment = false;
  Trainer<double> trainer(model, cfg);

  auto params = parameters(ref);
  std::vector<Tensor<double>> vel;
  for (const auto& p : params) vel.emplace_back(p.param->value.shape());
  std::vector<std::size_t> idx(16);
  for (int step = 0; step < 3; ++step) {
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = (static_cast<std::size_t>(step) * 5 + k) % data.train.size();
    const auto batch = make_batch<double>(data.train, idx, data.norm);
    trainer.step(batch, 0.05);

    // Reference: softmax minus one-hot over the batch, then momentum SGD.
    zero_grad(ref);
    Executor<double> exec(ref);
    const auto& z = exec.forward(batch.x, Mode::train, true);
    const std::size_t n = batch.labels.size(), c = z[0].shape()[1];
    Tensor<double> g(z[0].shape());
    for (std::size_t s = 0; s < n; ++s) {
      double m = -1e300, sum = 0;
      for (std::size_t k = 0; k < c; ++k) m = std::max(m, z[0][s * c + k]);
      for (std::size_t k = 0; k < c; ++k) sum += std::exp(z[0][s * c + k] - m);
      for (std::size_t k = 0; k < c; ++k)
        g[s * c + k] = (std::exp(z[0][s * c + k] - m) / sum - (static_cast<int>(k) == batch.labels[s])) / static_cast<double>(n);
    }
    const std::vector<Tensor<double>> grads{g};
    exec.backward(grads);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i].param;
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        vel[i][k] = 0.9 * vel[i][k] + p.grad[k] + 5e-4 * p.value[k];
        p.value[k] -= 0.05 * vel[i][k];
      }
    }
  }
  const auto pm = parameters(model);
  double worst = 0;
  for (std::size_t i = 0; i < pm.size(); ++i)
    worst = std::max(worst, nfe::testing::max_rel_error(pm[i].param->value, params[i].param->value));
  CHECK(worst < 1e-12);
}

TEST_CASE("identical exits log zero KL") {
  // Every stage has one group, so all exits share weights; heads are made equal.
  const auto data = tiny_data(32);
  const BackboneSpec spec = toy_spec(2, 4, 4);
  Rng rng(4);
  const auto net = init_backbone<double>(spec, rng);
  const FissionPlan plan = custom_plan(3, {1, 1});
  auto model = fission_transform(net, plan, build_mask_set(plan, spec.all_stage_shapes(), 1), rng);
  for (auto& h : model.heads) h = model.heads[0];
  TrainConfig cfg = quick(1);
  Trainer<double> t(model, cfg);
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
  const auto r = t.step(make_batch<double>(data.train, idx, data.norm), 0.01);
  for (double k : r.kl) CHECK(k == 0.0);
}

TEST_CASE("pruned weights stay exactly zero") {
  const auto data = tiny_data();
  auto model = tiny_model<float>(3, 12, 0.6, 3);
  train(model, data, quick(2));
  for (std::size_t i = 0; i < model.stage_weights.size(); ++i)
    for (std::size_t l = 0; l < model.stage_weights[i].size(); ++l)
      for (std::size_t k = 0; k < model.stage_weights[i][l].value.size(); ++k)
        if (!model.masks.pai_masks[i][l][k]) CHECK(model.stage_weights[i][l].value[k] == 0.0f);
}

TEST_CASE("a diverging run fails with a diverged error") {
  const auto data = tiny_data();
  auto model = tiny_model<float>(2, 13);
  TrainConfig cfg = quick(3);
  cfg.lr_initial = 1e30;
  try {
    train(model, data, cfg);
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::diverged);
  }
}

TEST_CASE("epoch log is written as JSON lines") {
  const auto data = tiny_data(32);
  auto model = tiny_model<float>(2, 14);
  const auto path = std::filesystem::temp_directory_path() / "nfe_train_log_test.jsonl";
  std::filesystem::remove(path);
  int calls = 0;
  TrainHooks hooks;
  hooks.log_path = path;
  hooks.on_epoch = [&](const EpochRecord&) { ++calls; };
  const auto r = train(model, data, quick(2), hooks);
  CHECK(calls == 2);
  std::ifstream in(path);
  int lines = 0;
  for (std::string line; std::getline(in, line);) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("exit_kl").size() == 2);
    ++lines;
  }
  CHECK(lines == 2);
  CHECK(r.epochs.back().exit_accuracy.size() == 2);
  std::filesystem::remove(path);
}

TEST_CASE("backpropagated gradients match finite differences") {
  Rng pick(77);
  for (int trial = 0; trial < 3; ++trial) {
    auto model = tiny_model<double>(2, 20 + static_cast<std::uint64_t>(trial), trial == 2 ? 0.5 : 0.0);
    Rng rng(trial);
    nfe::testing::scramble_norms(model, rng);
    const auto x = nfe::testing::random_input<double>(model.spec, 6, rng);
    std::vector<int> y;
    for (int s = 0; s < 6; ++s) y.push_back(static_cast<int>(rng.below(4)));
    LossOptions o;
    // The full objective; a detached teacher is a different (surrogate) gradient.
    o.alpha = 0.7 + trial;
    o.temperature = 2 + trial;
    o.detach_teacher = false;
    const double err = nfe::testing::fd_gradient_error(model, x, std::span<const int>(y), o, 50, pick);
    CHECK(err < 1e-4);
  }
}
