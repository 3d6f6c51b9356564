// SPDX-License-Identifier: Apache-2.0
#include "nfe/dataset.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <numbers>

#include "nfe/log.hpp"
#include "nfe/mask_io.hpp"

namespace fs = std::filesystem;

namespace nfe {

namespace {

constexpr std::size_t kCifarPixels = 3 * 32 * 32;

struct CifarLayout {
  const char* dir;
  const char* archive;
  const char* archive_md5;
  std::vector<const char*> train_files;
  const char* test_file;
  int label_bytes;
  std::size_t classes;
};

const CifarLayout& layout_for(const std::string& name) {
  static const CifarLayout c10{"cifar-10-batches-bin",
                               "cifar-10-binary.tar.gz",
                               "c32a1d4ab5d03f1284b67883e8d87530",
                               {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin",
                                "data_batch_5.bin"},
                               "test_batch.bin",
                               1,
                               10};
  static const CifarLayout c100{"cifar-100-binary",
                                "cifar-100-binary.tar.gz",
                                "03b5dce01913d631647c71ecec9e9cb8",
                                {"train.bin"},
                                "test.bin",
                                2,
                                100};
  if (name == "cifar10") return c10;
  if (name == "cifar100") return c100;
  fail(ErrorKind::invalid_argument, "unknown dataset '" + name + "'");
}

void append(ImageSet& dst, const ImageSet& src) {
  dst.pixels.insert(dst.pixels.end(), src.pixels.begin(), src.pixels.end());
  dst.labels.insert(dst.labels.end(), src.labels.begin(), src.labels.end());
}

std::string hex(const unsigned char* d, unsigned n) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (unsigned i = 0; i < n; ++i) {
    s.push_back(digits[d[i] >> 4]);
    s.push_back(digits[d[i] & 15]);
  }
  return s;
}

std::size_t parse_octal(const char* p, std::size_t n) {
  std::size_t v = 0;
  for (std::size_t i = 0; i < n && p[i]; ++i) {
    if (p[i] == ' ') continue;
    if (p[i] < '0' || p[i] > '7') fail(ErrorKind::dataset_corrupt, "malformed tar header size field");
    v = v * 8 + static_cast<std::size_t>(p[i] - '0');
  }
  return v;
}

std::string header_string(const char* p, std::size_t n) { return std::string(p, strnlen(p, n)); }

void check_split(const ImageSet& set, std::size_t expected, const std::string& what) {
  if (set.size() != expected)
    fail(ErrorKind::dataset_corrupt,
         what + ": expected " + std::to_string(expected) + " images, found " + std::to_string(set.size()));
}

DatasetSplits load_cifar(const DatasetDescriptor& desc) {
  const CifarLayout& lay = layout_for(desc.name);
  const fs::path root = data_root(desc);
  const fs::path dir = root / lay.dir;
  const fs::path archive = root / lay.archive;

  DatasetSplits out;
  out.name = desc.name;
  out.train.num_classes = out.test.num_classes = lay.classes;

  if (fs::is_directory(dir)) {
    for (const char* f : lay.train_files) {
      const fs::path p = dir / f;
      if (!fs::exists(p)) fail(ErrorKind::dataset_missing, "missing " + p.string());
      append(out.train, parse_cifar_records(read_file(p), lay.label_bytes, lay.classes));
    }
    const fs::path p = dir / lay.test_file;
    if (!fs::exists(p)) fail(ErrorKind::dataset_missing, "missing " + p.string());
    out.test = parse_cifar_records(read_file(p), lay.label_bytes, lay.classes);
  } else if (fs::exists(archive)) {
    if (desc.verify_checksum) {
      const std::string sum = md5_file(archive);
      if (sum != lay.archive_md5)
        fail(ErrorKind::checksum_mismatch,
             archive.string() + ": md5 " + sum + " does not match expected " + lay.archive_md5);
    }
    const auto entries = read_tar_gz(archive);
    auto find = [&](const char* file) -> const ArchiveEntry& {
      const std::string want = std::string(lay.dir) + "/" + file;
      for (const auto& e : entries)
        if (e.name == want || e.name == "./" + want) return e;
      fail(ErrorKind::dataset_corrupt, archive.string() + " lacks " + want);
    };
    for (const char* f : lay.train_files)
      append(out.train, parse_cifar_records(find(f).data, lay.label_bytes, lay.classes));
    out.test = parse_cifar_records(find(lay.test_file).data, lay.label_bytes, lay.classes);
  } else {
    fail(ErrorKind::dataset_missing, "no " + std::string(lay.dir) + "/ or " + lay.archive + " under " +
                                         root.string() + " (set NFE_DATA_DIR)");
  }
  check_split(out.train, 50000, desc.name + " train");
  check_split(out.test, 10000, desc.name + " test");
  return out;
}

}  // namespace

std::vector<std::size_t> ImageSet::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int y : labels) ++counts.at(static_cast<std::size_t>(y));
  return counts;
}

fs::path data_root(const DatasetDescriptor& desc) {
  if (!desc.root.empty()) return desc.root;
  if (const char* env = std::getenv("NFE_DATA_DIR"); env && *env) return env;
  return "data";
}

ImageSet parse_cifar_records(std::span<const std::uint8_t> bytes, int label_bytes, std::size_t num_classes) {
  require(label_bytes == 1 || label_bytes == 2, "label_bytes must be 1 or 2");
  const std::size_t rec = static_cast<std::size_t>(label_bytes) + kCifarPixels;
  if (bytes.empty() || bytes.size() % rec != 0)
    fail(ErrorKind::dataset_corrupt,
         "CIFAR record stream of " + std::to_string(bytes.size()) + " bytes is not a multiple of " + std::to_string(rec));
  ImageSet set;
  set.num_classes = num_classes;
  const std::size_t n = bytes.size() / rec;
  set.labels.resize(n);
  set.pixels.resize(n * kCifarPixels);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* r = bytes.data() + i * rec;
    const std::size_t label = r[label_bytes - 1];
    if (label >= num_classes) fail(ErrorKind::dataset_corrupt, "label " + std::to_string(label) + " out of range");
    set.labels[i] = static_cast<int>(label);
    std::memcpy(set.pixels.data() + i * kCifarPixels, r + label_bytes, kCifarPixels);
  }
  return set;
}

std::vector<ArchiveEntry> parse_tar(std::span<const std::uint8_t> bytes) {
  std::vector<ArchiveEntry> out;
  std::size_t pos = 0;
  std::string long_name;
  while (pos + 512 <= bytes.size()) {
    const char* h = reinterpret_cast<const char*>(bytes.data() + pos);
    if (std::all_of(h, h + 512, [](char c) { return c == 0; })) break;
    unsigned sum = 0;
    for (int i = 0; i < 512; ++i) sum += (i >= 148 && i < 156) ? ' ' : static_cast<unsigned char>(h[i]);
    if (sum != parse_octal(h + 148, 8)) fail(ErrorKind::dataset_corrupt, "tar header checksum mismatch");
    const std::size_t size = parse_octal(h + 124, 12);
    const char type = h[156];
    pos += 512;
    if (pos + size > bytes.size()) fail(ErrorKind::dataset_corrupt, "truncated tar archive");
    std::string name = header_string(h, 100);
    if (std::memcmp(h + 257, "ustar", 5) == 0) {
      const std::string prefix = header_string(h + 345, 155);
      if (!prefix.empty()) name = prefix + "/" + name;
    }
    if (type == 'L') {
      long_name = header_string(reinterpret_cast<const char*>(bytes.data() + pos), size);
    } else {
      if (!long_name.empty()) name = std::exchange(long_name, {});
      if (type == '0' || type == '\0')
        out.push_back({name, std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                                       bytes.begin() + static_cast<std::ptrdiff_t>(pos + size))});
    }
    pos += (size + 511) / 512 * 512;
  }
  return out;
}

std::vector<ArchiveEntry> read_tar_gz(const fs::path& path) {
  const auto packed = read_file(path);
  z_stream zs{};
  if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) fail(ErrorKind::io, "inflateInit2 failed");
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> chunk(1 << 20);
  zs.next_in = const_cast<Bytef*>(packed.data());
  zs.avail_in = static_cast<uInt>(packed.size());
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk.data();
    zs.avail_out = static_cast<uInt>(chunk.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      fail(ErrorKind::dataset_corrupt, path.string() + ": gzip stream is corrupt");
    }
    out.insert(out.end(), chunk.begin(), chunk.begin() + static_cast<std::ptrdiff_t>(chunk.size() - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      fail(ErrorKind::dataset_corrupt, path.string() + ": gzip stream is truncated");
    }
  }
  inflateEnd(&zs);
  return parse_tar(out);
}

std::string md5_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_md5(), nullptr);
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char d[EVP_MAX_MD_SIZE];
  unsigned n = 0;
  EVP_DigestFinal_ex(ctx, d, &n);
  EVP_MD_CTX_free(ctx);
  return hex(d, n);
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char d[EVP_MAX_MD_SIZE];
  unsigned n = 0;
  EVP_Digest(bytes.data(), bytes.size(), d, &n, EVP_sha256(), nullptr);
  return hex(d, n);
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

ImageSet stratified_subsample(const ImageSet& set, double fraction, Rng& rng) {
  require(fraction > 0.0 && fraction <= 1.0, "subsample fraction must lie in (0, 1]");
  if (fraction == 1.0) return set;
  std::vector<std::vector<std::size_t>> by_class(set.num_classes);
  for (std::size_t i = 0; i < set.size(); ++i) by_class[static_cast<std::size_t>(set.labels[i])].push_back(i);
  std::vector<std::size_t> keep;
  for (auto& idx : by_class) {
    const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    rng.shuffle(idx.begin(), idx.end());
    keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(k, idx.size())));
  }
  std::sort(keep.begin(), keep.end());
  ImageSet out = set;
  out.labels.clear();
  out.pixels.clear();
  const std::size_t isz = set.image_size();
  for (std::size_t i : keep) {
    out.labels.push_back(set.labels[i]);
    out.pixels.insert(out.pixels.end(), set.pixels.begin() + static_cast<std::ptrdiff_t>(i * isz),
                      set.pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * isz));
  }
  return out;
}

Normalization channel_stats(const ImageSet& set) {
  require(set.size() > 0, "cannot compute statistics of an empty image set");
  Normalization norm;
  const std::size_t plane = set.height * set.width;
  for (std::size_t c = 0; c < set.channels; ++c) {
    double s = 0, s2 = 0;
    for (std::size_t i = 0; i < set.size(); ++i) {
      const std::uint8_t* p = set.pixels.data() + i * set.image_size() + c * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        const double v = p[k] / 255.0;
        s += v;
        s2 += v * v;
      }
    }
    const double n = static_cast<double>(set.size() * plane);
    const double mean = s / n;
    norm.mean.push_back(mean);
    norm.std.push_back(std::sqrt(std::max(s2 / n - mean * mean, 1e-12)));
  }
  return norm;
}

ImageSet synthetic_images(std::size_t count, std::size_t num_classes, std::size_t size, double noise,
                          std::uint64_t seed, std::uint64_t split) {
  require(num_classes >= 2 && size >= 4, "synthetic set needs >= 2 classes and >= 4 pixel images");
  Rng proto_rng = Rng(seed).fork(0);
  Rng sample_rng = Rng(seed).fork(1 + split);
  const std::size_t plane = size * size;
  // Each class prototype is a sum of three random plane waves per channel.
  std::vector<double> protos(num_classes * 3 * plane, 0.0);
  for (std::size_t c = 0; c < num_classes; ++c)
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (int wave = 0; wave < 3; ++wave) {
        const double fx = proto_rng.uniform(-2.0, 2.0), fy = proto_rng.uniform(-2.0, 2.0);
        const double phase = proto_rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double amp = proto_rng.uniform(0.3, 1.0);
        for (std::size_t y = 0; y < size; ++y)
          for (std::size_t x = 0; x < size; ++x)
            protos[(c * 3 + ch) * plane + y * size + x] +=
                amp * std::cos(2.0 * std::numbers::pi * (fx * x + fy * y) / static_cast<double>(size) + phase);
      }
  ImageSet set;
  set.height = set.width = size;
  set.num_classes = num_classes;
  set.labels.resize(count);
  set.pixels.resize(count * 3 * plane);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t c = i % num_classes;
    set.labels[i] = static_cast<int>(c);
    const double gain = sample_rng.uniform(0.6, 1.2);
    for (std::size_t k = 0; k < 3 * plane; ++k) {
      const double v = 0.5 + 0.2 * gain * protos[c * 3 * plane + k] + noise * 0.2 * sample_rng.normal();
      set.pixels[i * 3 * plane + k] = static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
    }
  }
  return set;
}

DatasetSplits ingest_dataset(const DatasetDescriptor& desc) {
  DatasetSplits out;
  if (desc.name == "synthetic") {
    out.name = "synthetic";
    out.train = synthetic_images(desc.synthetic_train, desc.synthetic_classes, desc.synthetic_size,
                                 desc.synthetic_noise, desc.seed);
    out.test = synthetic_images(desc.synthetic_test, desc.synthetic_classes, desc.synthetic_size,
                                desc.synthetic_noise, desc.seed, 1);
  } else {
    out = load_cifar(desc);
  }
  Rng rng = Rng(desc.seed).fork(0xda7a);
  out.train = stratified_subsample(out.train, desc.subsample, rng);
  out.test = stratified_subsample(out.test, desc.test_subsample, rng);
  out.norm = channel_stats(out.train);
  log::info("dataset " + out.name + ": " + std::to_string(out.train.size()) + " train / " +
            std::to_string(out.test.size()) + " test images");
  return out;
}

template <typename T>
Batch<T> make_batch(const ImageSet& set, std::span<const std::size_t> indices, const Normalization& norm,
                    bool augment, Rng* rng) {
  require(!augment || rng != nullptr, "augmentation needs a random source");
  require(norm.mean.size() == set.channels && norm.std.size() == set.channels, "normalisation channel mismatch");
  const std::size_t h = set.height, w = set.width, ch = set.channels, plane = h * w;
  constexpr int pad = 4;
  Batch<T> b;
  b.x = Tensor<T>({indices.size(), ch, h, w});
  b.labels.reserve(indices.size());
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const std::size_t idx = indices[n];
    require(idx < set.size(), "sample index out of range");
    b.labels.push_back(set.labels[idx]);
    int dy = 0, dx = 0;
    bool flip = false;
    if (augment) {
      dy = static_cast<int>(rng->below(2 * pad + 1)) - pad;
      dx = static_cast<int>(rng->below(2 * pad + 1)) - pad;
      flip = rng->bernoulli(0.5);
    }
    const std::uint8_t* src = set.pixels.data() + idx * set.image_size();
    for (std::size_t c = 0; c < ch; ++c) {
      const double m = norm.mean[c], inv = 1.0 / norm.std[c];
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const int sx0 = flip ? static_cast<int>(w - 1 - x) : static_cast<int>(x);
          const int sy = static_cast<int>(y) + dy, sx = sx0 + dx;
          double v = 0.0;  // zero padding in raw pixel space
          if (sy >= 0 && sx >= 0 && sy < static_cast<int>(h) && sx < static_cast<int>(w))
            v = src[c * plane + static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)] / 255.0;
          b.x.at(n, c, y, x) = static_cast<T>((v - m) * inv);
        }
    }
  }
  return b;
}

template <typename T>
Batch<T> full_batch(const ImageSet& set, const Normalization& norm) {
  std::vector<std::size_t> idx(set.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return make_batch<T>(set, idx, norm);
}

template Batch<float> make_batch<float>(const ImageSet&, std::span<const std::size_t>, const Normalization&, bool,
                                        Rng*);
template Batch<double> make_batch<double>(const ImageSet&, std::span<const std::size_t>, const Normalization&, bool,
                                          Rng*);
template Batch<float> full_batch<float>(const ImageSet&, const Normalization&);
template Batch<double> full_batch<double>(const ImageSet&, const Normalization&);

}  // namespace nfe
