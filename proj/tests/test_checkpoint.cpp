// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>

#include "nfe/checkpoint.hpp"
#include "nfe/mask_io.hpp"
#include "test_util.hpp"

using namespace nfe;

namespace {

template <typename T>
MultiExitModel<T> sample_model(int exits, int stages, std::uint64_t seed) {
  const BackboneSpec spec = testing::toy_spec(stages, 4, 4);
  Rng rng(seed);
  const auto net = init_backbone<T>(spec, rng);
  const FissionPlan plan = default_plan(exits, stages);
  auto model = fission_transform(net, plan, build_mask_set(plan, spec.all_stage_shapes(), seed), rng);
  Rng s(seed + 1);
  testing::scramble_norms(model, s);
  return model;
}

}  // namespace

TEST_CASE("checkpoint round trip reproduces evaluation outputs") {
  for (int exits : {1, 2, 3}) {
    auto model = sample_model<float>(exits, 3, 40 + static_cast<std::uint64_t>(exits));
    const auto bytes = encode_checkpoint(model, {{"spec_hash", "abc"}});
    nlohmann::json meta;
    auto back = decode_checkpoint<float>(bytes, &meta);
    CHECK(meta.at("spec_hash") == "abc");
    CHECK(back.plan.groups_per_stage == model.plan.groups_per_stage);
    CHECK(parameter_count(back) == parameter_count(model));
    Rng rng(1);
    const auto x = testing::random_input<float>(model.spec, 4, rng);
    const auto a = forward(model, x), b = forward(back, x);
    REQUIRE(a.size() == b.size());
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);
    CHECK(encode_checkpoint(back, {{"spec_hash", "abc"}}) == bytes);
  }
}

TEST_CASE("checkpoint files and precision conversion") {
  auto model = sample_model<double>(2, 2, 7);
  const auto path = std::filesystem::temp_directory_path() / "nfe_ckpt_test.ckpt";
  save_checkpoint(path, model);
  auto same = load_checkpoint<double>(path);
  Rng rng(2);
  const auto x = testing::random_input<double>(model.spec, 2, rng);
  CHECK(forward(model, x)[1] == forward(same, x)[1]);

  auto narrow = load_checkpoint<float>(path);
  Rng rf(2);
  const auto xf = testing::random_input<float>(model.spec, 2, rf);
  const auto zf = forward(narrow, xf)[1];
  const auto zd = forward(model, x)[1];
  for (std::size_t k = 0; k < zf.size(); ++k) CHECK(zf[k] == doctest::Approx(zd[k]).epsilon(1e-4));
  std::filesystem::remove(path);
}

TEST_CASE("corrupted checkpoints are rejected") {
  auto model = sample_model<float>(2, 2, 9);
  const auto bytes = encode_checkpoint(model);
  for (std::size_t pos : {std::size_t{3}, bytes.size() / 2, bytes.size() - 1}) {
    auto bad = bytes;
    bad[pos] ^= 0x10;
    CHECK_THROWS_AS(decode_checkpoint<float>(bad), Error);
  }
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x01;
  try {
    (void)decode_checkpoint<float>(flipped);
    FAIL("expected a checksum error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::checksum_mismatch);
  }
  std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + 20);
  CHECK_THROWS_AS(decode_checkpoint<float>(truncated), Error);
}

TEST_CASE("backbone spec JSON round trip") {
  for (const BackboneSpec& s : {small_resnet(10), mid_resnet(100), wide_resnet_like(10), testing::toy_spec(3)}) {
    const BackboneSpec back = backbone_spec_from_json(to_json(s));
    CHECK(to_json(back) == to_json(s));
    CHECK(back.all_stage_shapes() == s.all_stage_shapes());
  }
}
