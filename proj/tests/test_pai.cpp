// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "nfe/pai.hpp"
#include "test_util.hpp"

using namespace nfe;

namespace {

std::size_t ones(const std::vector<Mask>& ms) {
  std::size_t n = 0;
  for (const auto& m : ms) n += count_ones(m);
  return n;
}

template <typename T>
std::vector<Mask> snip(const std::vector<Tensor<T>>& w, const std::vector<Tensor<T>>& g, double s,
                       std::vector<bool> excl = {}) {
  std::vector<const Tensor<T>*> wp, gp;
  for (const auto& t : w) wp.push_back(&t);
  for (const auto& t : g) gp.push_back(&t);
  std::unique_ptr<bool[]> flags(new bool[excl.size() + 1]);
  for (std::size_t i = 0; i < excl.size(); ++i) flags[i] = excl[i];
  return snip_mask<T>(wp, gp, s, std::span<const bool>(flags.get(), excl.size()));
}

}  // namespace

TEST_CASE("keep_count") {
  CHECK(keep_count(0.0, 10) == 10);
  CHECK(keep_count(0.5, 4) == 2);
  CHECK(keep_count(0.7, 10) == 3);
  CHECK(keep_count(0.75, 100000) == 25000);
  CHECK(keep_count(0.9, 7) == 1);  // ceil(0.7)
  CHECK(keep_count(0.99, 10) == 1);
}

TEST_CASE("SNIP keeps the largest saliencies") {
  // |w*g| = [3, 1, 2, 4] at S = 0.5 keeps positions 0 and 3.
  const std::vector<Tensor<double>> w{Tensor<double>({4}, {3, -1, 2, 4})};
  const std::vector<Tensor<double>> g{Tensor<double>({4}, {1, 1, -1, 1})};
  const auto m = snip(w, g, 0.5);
  CHECK(m[0].storage() == std::vector<std::uint8_t>{1, 0, 0, 1});
}

TEST_CASE("SNIP ranks globally across layers") {
  const std::vector<Tensor<double>> w{Tensor<double>({2}, {1, 1}), Tensor<double>({3}, {1, 1, 1})};
  const std::vector<Tensor<double>> g{Tensor<double>({2}, {0.1, 0.2}), Tensor<double>({3}, {5, 4, 3})};
  const auto m = snip(w, g, 0.4);  // keep 3 of 5
  CHECK(m[0].storage() == std::vector<std::uint8_t>{0, 0});
  CHECK(m[1].storage() == std::vector<std::uint8_t>{1, 1, 1});
}

TEST_CASE("SNIP ties: larger magnitude first, then lower flat index") {
  const std::vector<Tensor<double>> w{Tensor<double>({6}, {1, -3, 2, 3, 0.5, 2})};
  const std::vector<Tensor<double>> g{Tensor<double>({6}, 0.0)};
  const auto m = snip(w, g, 0.5);
  // all saliencies zero; |w| ranks 3,3,2,2,1,0.5 -> indices 1, 3, then 2.
  CHECK(m[0].storage() == std::vector<std::uint8_t>{0, 1, 1, 1, 0, 0});

  const std::vector<Tensor<double>> same{Tensor<double>({5}, 1.0)};
  const std::vector<Tensor<double>> zero{Tensor<double>({5}, 0.0)};
  CHECK(snip(same, zero, 0.6)[0].storage() == std::vector<std::uint8_t>{1, 1, 0, 0, 0});
}

TEST_CASE("SNIP meets the budget exactly on a large layer") {
  Rng rng(3);
  std::vector<Tensor<float>> w{Tensor<float>({100000})}, g{Tensor<float>({100000})};
  for (auto& v : w[0].values()) v = static_cast<float>(rng.normal());
  for (auto& v : g[0].values()) v = static_cast<float>(rng.normal());
  const auto m = snip(w, g, 0.75);
  CHECK(count_ones(m[0]) == 25000);
  float kept_min = 1e30f, pruned_max = 0;
  for (std::size_t k = 0; k < w[0].size(); ++k) {
    const float s = std::abs(w[0][k] * g[0][k]);
    if (m[0][k])
      kept_min = std::min(kept_min, s);
    else
      pruned_max = std::max(pruned_max, s);
  }
  CHECK(kept_min >= pruned_max);
}

TEST_CASE("SNIP leaves excluded layers dense") {
  const std::vector<Tensor<double>> w{Tensor<double>({4}, 1.0), Tensor<double>({4}, 1.0)};
  const std::vector<Tensor<double>> g{Tensor<double>({4}, 9.0), Tensor<double>({4}, {1, 2, 3, 4})};
  const auto m = snip(w, g, 0.5, {true, false});
  CHECK(count_ones(m[0]) == 4);
  CHECK(m[1].storage() == std::vector<std::uint8_t>{0, 0, 1, 1});
}

TEST_CASE("ERK densities") {
  const std::vector<Shape> two{{8, 8, 3, 3}, {8, 8, 3, 3}};
  CHECK(erk_densities(two, 0.0) == std::vector<double>{1.0, 1.0});
  const auto d = erk_densities(two, 0.5);
  CHECK(d[0] == doctest::Approx(0.5));
  CHECK(d[1] == doctest::Approx(0.5));

  // Independent closed form when nothing clamps: density = eps * score.
  const std::vector<Shape> mixed{{16, 16, 3, 3}, {32, 16, 3, 3}, {32, 32, 3, 3}, {64, 32, 3, 3}};
  auto score = [](const Shape& s) {
    double n = 1, sum = 0;
    for (auto v : s) n *= static_cast<double>(v);
    for (auto v : s.size() == 4 ? Shape{s[0], s[1], s[2] * s[3]} : s) sum += static_cast<double>(v);
    return sum / n;
  };
  const double S = 0.9;
  double total = 0, weighted = 0;
  for (const auto& s : mixed) {
    total += static_cast<double>(numel(s));
    weighted += score(s) * static_cast<double>(numel(s));
  }
  const double eps = (1 - S) * total / weighted;
  const auto dm = erk_densities(mixed, S);
  bool clamped = false;
  for (std::size_t i = 0; i < mixed.size(); ++i) clamped = clamped || eps * score(mixed[i]) > 1;
  REQUIRE_FALSE(clamped);
  for (std::size_t i = 0; i < mixed.size(); ++i) CHECK(dm[i] == doctest::Approx(eps * score(mixed[i])));

  // A layer 10x larger gets a lower density.
  const std::vector<Shape> sizes{{8, 8, 3, 3}, {80, 8, 3, 3}};
  const auto ds = erk_densities(sizes, 0.5);
  CHECK(ds[1] < ds[0]);
}

TEST_CASE("ERK clamps small layers and redistributes") {
  const std::vector<Shape> shapes{{2, 2, 1, 1}, {64, 64, 3, 3}};
  const auto d = erk_densities(shapes, 0.5);
  CHECK(d[0] == 1.0);
  const double kept = d[0] * 4 + d[1] * 64 * 64 * 9;
  CHECK(kept == doctest::Approx(0.5 * (4 + 64 * 64 * 9)));
}

TEST_CASE("ERK masks meet the budget exactly and are deterministic") {
  const std::vector<Shape> shapes{{16, 3, 3, 3}, {16, 16, 3, 3}, {32, 16, 3, 3}, {32, 32, 3, 3}};
  std::size_t total = 0;
  for (const auto& s : shapes) total += numel(s);
  for (double S : {0.25, 0.5, 0.75, 0.9}) {
    Rng a(42), b(42);
    const auto ma = erk_mask(shapes, S, a);
    const auto mb = erk_mask(shapes, S, b);
    CHECK(ones(ma) == keep_count(S, total));
    for (std::size_t i = 0; i < ma.size(); ++i) CHECK(ma[i] == mb[i]);
  }
  Rng r(1);
  const std::vector<bool> excl{true, false, false, false};
  std::unique_ptr<bool[]> flags(new bool[4]);
  std::copy(excl.begin(), excl.end(), flags.get());
  const auto m = erk_mask(shapes, 0.5, r, std::span<const bool>(flags.get(), 4));
  CHECK(count_ones(m[0]) == numel(shapes[0]));
  CHECK(count_ones(m[1]) + count_ones(m[2]) + count_ones(m[3]) == keep_count(0.5, total - numel(shapes[0])));
}

TEST_CASE("compute_pai_masks on a network") {
  const BackboneSpec spec = testing::toy_spec(3, 4, 4);
  Rng init(5);
  const auto net = init_backbone<double>(spec, init);
  const ImageSet set = synthetic_images(32, 4, 8, 0.3, 9);
  const auto batch = full_batch<double>(set, channel_stats(set));
  const std::vector<Batch<double>> data{batch};

  std::size_t total = 0;
  for (const auto& st : spec.all_stage_shapes())
    for (const auto& s : st) total += numel(s);

  for (PaiMethod m : {PaiMethod::snip, PaiMethod::erk}) {
    for (double S : {0.25, 0.5, 0.75, 0.9}) {
      PaiConfig cfg;
      cfg.method = m;
      cfg.sparsity = S;
      Rng r1(7), r2(7);
      const auto a = compute_pai_masks<double>(net, cfg, data, r1);
      const auto b = compute_pai_masks<double>(net, cfg, data, r2);
      REQUIRE(a.size() == 3);
      std::size_t kept = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        kept += ones(a[i]);
        for (std::size_t l = 0; l < a[i].size(); ++l) CHECK(a[i][l] == b[i][l]);
      }
      CHECK(kept == keep_count(S, total));
    }
  }

  PaiConfig none;
  Rng r(1);
  for (const auto& st : compute_pai_masks<double>(net, none, {}, r))
    for (const auto& m : st) CHECK(count_ones(m) == m.size());

  PaiConfig needs_data;
  needs_data.method = PaiMethod::snip;
  needs_data.sparsity = 0.5;
  CHECK_THROWS_AS(compute_pai_masks<double>(net, needs_data, {}, r), Error);
}

TEST_CASE("PaI config validation") {
  PaiConfig c;
  c.sparsity = 1.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c.sparsity = -0.1;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK(parse_pai_method("erk") == PaiMethod::erk);
  CHECK_THROWS_AS(parse_pai_method("magnitude"), Error);
}
