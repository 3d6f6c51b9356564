// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <optional>

#include "nfe/dataset.hpp"
#include "nfe/error.hpp"
#include "nfe/mask_io.hpp"

using namespace nfe;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> cifar_records(const std::vector<int>& labels, int label_bytes) {
  std::vector<std::uint8_t> out;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (label_bytes == 2) out.push_back(static_cast<std::uint8_t>(labels[r] / 5));
    out.push_back(static_cast<std::uint8_t>(labels[r]));
    for (std::size_t k = 0; k < 3072; ++k) out.push_back(static_cast<std::uint8_t>((k + r * 7) & 0xff));
  }
  return out;
}

void tar_header(std::vector<std::uint8_t>& out, const std::string& name, std::size_t size, char type) {
  std::uint8_t h[512] = {};
  std::memcpy(h, name.data(), std::min<std::size_t>(name.size(), 100));
  std::snprintf(reinterpret_cast<char*>(h + 100), 8, "%07o", 0644);
  std::snprintf(reinterpret_cast<char*>(h + 124), 12, "%011zo", size);
  h[156] = static_cast<std::uint8_t>(type);
  std::memcpy(h + 257, "ustar", 5);
  std::memset(h + 148, ' ', 8);
  unsigned sum = 0;
  for (auto b : h) sum += b;
  std::snprintf(reinterpret_cast<char*>(h + 148), 8, "%06o", sum);
  out.insert(out.end(), h, h + 512);
}

void tar_file(std::vector<std::uint8_t>& out, const std::string& name, const std::vector<std::uint8_t>& data) {
  if (name.size() > 99) {
    std::vector<std::uint8_t> long_name(name.begin(), name.end());
    long_name.push_back(0);
    tar_header(out, "././@LongLink", long_name.size(), 'L');
    out.insert(out.end(), long_name.begin(), long_name.end());
    out.resize((out.size() + 511) / 512 * 512, 0);
  }
  tar_header(out, name.substr(0, 99), data.size(), '0');
  out.insert(out.end(), data.begin(), data.end());
  out.resize((out.size() + 511) / 512 * 512, 0);
}

void write_gz(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  gzFile f = gzopen(path.string().c_str(), "wb");
  REQUIRE(f != nullptr);
  gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
  gzclose(f);
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("nfe_dataset_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::optional<ErrorKind> kind_of(const DatasetDescriptor& d) {
  try {
    (void)ingest_dataset(d);
  } catch (const Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

}  // namespace

TEST_CASE("CIFAR record parsing") {
  const auto bytes = cifar_records({3, 9, 0}, 1);
  const ImageSet s = parse_cifar_records(bytes, 1, 10);
  CHECK(s.size() == 3);
  CHECK(s.labels == std::vector<int>{3, 9, 0});
  CHECK(s.pixels.size() == 3 * 3072);
  CHECK(s.pixels[3072 + 5] == static_cast<std::uint8_t>((5 + 7) & 0xff));

  const ImageSet fine = parse_cifar_records(cifar_records({42, 99}, 2), 2, 100);
  CHECK(fine.labels == std::vector<int>{42, 99});

  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(parse_cifar_records(truncated, 1, 10), Error);
  CHECK_THROWS_AS(parse_cifar_records(cifar_records({12}, 1), 1, 10), Error);
}

TEST_CASE("tar archives, including long names") {
  std::vector<std::uint8_t> tar;
  const std::vector<std::uint8_t> a{1, 2, 3}, b(700, 9);
  const std::string long_name = std::string(120, 'x') + "/file.bin";
  tar_file(tar, "dir/a.bin", a);
  tar_file(tar, long_name, b);
  tar.resize(tar.size() + 1024, 0);
  const auto entries = parse_tar(tar);
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].name == "dir/a.bin");
  CHECK(entries[0].data == a);
  CHECK(entries[1].name == long_name);
  CHECK(entries[1].data == b);

  auto bad = tar;
  bad[10] ^= 0x40;
  CHECK_THROWS_AS(parse_tar(bad), Error);

  const fs::path dir = scratch("tar");
  write_gz(dir / "x.tar.gz", tar);
  const auto gz = read_tar_gz(dir / "x.tar.gz");
  REQUIRE(gz.size() == 2);
  CHECK(gz[1].data == b);
  fs::remove_all(dir);
}

TEST_CASE("hashes") {
  CHECK(sha256_hex(std::string("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const fs::path dir = scratch("md5");
  write_file(dir / "f", std::vector<std::uint8_t>{'a', 'b', 'c'});
  CHECK(md5_file(dir / "f") == "900150983cd24fb0d6963f7d28e17f72");
  fs::remove_all(dir);
}

TEST_CASE("ingest failures are classified") {
  DatasetDescriptor d;
  d.root = scratch("missing").string();
  CHECK(kind_of(d) == ErrorKind::dataset_missing);
  d.name = "cifar100";
  CHECK(kind_of(d) == ErrorKind::dataset_missing);
  d.name = "imagenet";
  CHECK(kind_of(d) == ErrorKind::invalid_argument);

  // An archive that is not the published one.
  d.name = "cifar10";
  std::vector<std::uint8_t> tar;
  tar_file(tar, "cifar-10-batches-bin/test_batch.bin", cifar_records({1, 2}, 1));
  tar.resize(tar.size() + 1024, 0);
  write_gz(fs::path(d.root) / "cifar-10-binary.tar.gz", tar);
  CHECK(kind_of(d) == ErrorKind::checksum_mismatch);
  d.verify_checksum = false;
  CHECK(kind_of(d) == ErrorKind::dataset_corrupt);  // lacks the training batches

  // Extracted directory with too few images.
  const fs::path root = scratch("short");
  fs::create_directories(root / "cifar-10-batches-bin");
  for (const char* f : {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin",
                        "data_batch_5.bin", "test_batch.bin"})
    write_file(root / "cifar-10-batches-bin" / f, cifar_records({0, 1, 2}, 1));
  d.root = root.string();
  CHECK(kind_of(d) == ErrorKind::dataset_corrupt);
  fs::remove_all(root);
  fs::remove_all(fs::temp_directory_path() / "nfe_dataset_test_missing");
}

TEST_CASE("stratified subsampling keeps class proportions") {
  ImageSet s;
  s.channels = 1;
  s.height = s.width = 1;
  s.num_classes = 3;
  for (int c = 0; c < 3; ++c)
    for (int k = 0; k < 100 * (c + 1); ++k) {
      s.labels.push_back(c);
      s.pixels.push_back(static_cast<std::uint8_t>(s.labels.size() & 0xff));
    }
  Rng rng(1);
  const ImageSet sub = stratified_subsample(s, 0.1, rng);
  CHECK(sub.class_counts() == std::vector<std::size_t>{10, 20, 30});
  CHECK(sub.pixels.size() == 60);
  Rng again(1);
  CHECK(stratified_subsample(s, 0.1, again).pixels == sub.pixels);
  Rng full(2);
  CHECK(stratified_subsample(s, 1.0, full).pixels == s.pixels);
  CHECK_THROWS_AS(stratified_subsample(s, 0.0, full), Error);
}

TEST_CASE("synthetic data and batches") {
  const ImageSet a = synthetic_images(50, 5, 8, 0.3, 4);
  const ImageSet b = synthetic_images(50, 5, 8, 0.3, 4);
  CHECK(a.pixels == b.pixels);
  CHECK(a.labels == b.labels);
  CHECK(a.class_counts() == std::vector<std::size_t>{10, 10, 10, 10, 10});
  CHECK(synthetic_images(50, 5, 8, 0.3, 5).pixels != a.pixels);

  const Normalization norm = channel_stats(a);
  REQUIRE(norm.mean.size() == 3);
  const auto full = full_batch<double>(a, norm);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    const std::size_t plane = 64;
    for (std::size_t n = 0; n < 50; ++n)
      for (std::size_t k = 0; k < plane; ++k) m += full.x[(n * 3 + c) * plane + k];
    m /= 50.0 * plane;
    for (std::size_t n = 0; n < 50; ++n)
      for (std::size_t k = 0; k < plane; ++k) v += std::pow(full.x[(n * 3 + c) * plane + k] - m, 2);
    CHECK(std::abs(m) < 1e-9);
    CHECK(v / (50.0 * plane) == doctest::Approx(1.0).epsilon(1e-9));
  }

  // Without augmentation a batch is a pure function of the indices.
  const std::vector<std::size_t> idx{3, 1, 4};
  const auto b1 = make_batch<float>(a, idx, norm);
  const auto b2 = make_batch<float>(a, idx, norm);
  CHECK(b1.x == b2.x);
  CHECK(b1.labels == std::vector<int>{a.labels[3], a.labels[1], a.labels[4]});

  // Augmentation draws from the generator, deterministically.
  Rng r1(9), r2(9);
  const auto g1 = make_batch<float>(a, idx, norm, true, &r1);
  const auto g2 = make_batch<float>(a, idx, norm, true, &r2);
  CHECK(g1.x == g2.x);
  bool differs = false;
  Rng r3(10);
  for (int t = 0; t < 5 && !differs; ++t) differs = make_batch<float>(a, idx, norm, true, &r3).x != b1.x;
  CHECK(differs);
}

TEST_CASE("synthetic splits share class prototypes") {
  // Nearest class mean fitted on one split classifies the other.
  const ImageSet train = synthetic_images(200, 4, 8, 0.35, 6, 0);
  const ImageSet test = synthetic_images(100, 4, 8, 0.35, 6, 1);
  CHECK(train.pixels != test.pixels);
  const std::size_t d = train.image_size();
  std::vector<double> mean(4 * d, 0.0);
  for (std::size_t i = 0; i < train.size(); ++i)
    for (std::size_t k = 0; k < d; ++k) mean[static_cast<std::size_t>(train.labels[i]) * d + k] += train.pixels[i * d + k] / 50.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    int best = 0;
    double best_dist = 1e300;
    for (int c = 0; c < 4; ++c) {
      double dist = 0;
      for (std::size_t k = 0; k < d; ++k) dist += std::pow(test.pixels[i * d + k] - mean[static_cast<std::size_t>(c) * d + k], 2);
      if (dist < best_dist) best_dist = dist, best = c;
    }
    correct += best == test.labels[i];
  }
  CHECK(correct >= 90);
}

TEST_CASE("synthetic ingest is deterministic and split-consistent") {
  DatasetDescriptor d;
  d.name = "synthetic";
  d.synthetic_train = 100;
  d.synthetic_test = 40;
  d.synthetic_classes = 4;
  d.synthetic_size = 8;
  d.subsample = 0.5;
  const auto a = ingest_dataset(d);
  const auto b = ingest_dataset(d);
  std::size_t expected = 0;
  for (std::size_t c : synthetic_images(100, 4, 8, d.synthetic_noise, d.seed).class_counts())
    expected += static_cast<std::size_t>(std::llround(0.5 * static_cast<double>(c)));
  CHECK(a.train.size() == expected);
  CHECK(a.test.size() == 40);
  CHECK(a.train.pixels == b.train.pixels);
  CHECK(a.test.pixels == b.test.pixels);
  CHECK(a.norm.mean == b.norm.mean);
  CHECK(a.train.pixels != a.test.pixels);
}
