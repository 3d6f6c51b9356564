// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nfe/rng.hpp"
#include "nfe/tensor.hpp"

namespace nfe {

/// Raw 8-bit images, NCHW, plus integer labels.
struct ImageSet {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 10;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t image_size() const noexcept { return channels * height * width; }
  std::vector<std::size_t> class_counts() const;
};

struct Normalization {
  std::vector<double> mean;  // per channel, in [0, 1] pixel units
  std::vector<double> std;
};

struct DatasetSplits {
  std::string name;
  ImageSet train;
  ImageSet test;
  Normalization norm;
};

struct DatasetDescriptor {
  /// "cifar10", "cifar100" or "synthetic".
  std::string name = "cifar10";
  /// Cache directory; empty means $NFE_DATA_DIR, then ./data.
  std::string root;
  /// Stratified fraction of each split kept, in (0, 1].
  double subsample = 1.0;
  double test_subsample = 1.0;
  std::uint64_t seed = 0;
  bool augment = true;
  bool verify_checksum = true;
  // Synthetic generator sizes.
  std::size_t synthetic_train = 2000;
  std::size_t synthetic_test = 500;
  std::size_t synthetic_classes = 10;
  std::size_t synthetic_size = 16;
  double synthetic_noise = 0.35;
};

template <typename T>
struct Batch {
  Tensor<T> x;
  std::vector<int> labels;
};

/// Cache directory per the descriptor and the environment.
std::filesystem::path data_root(const DatasetDescriptor& desc);

/// Loads, validates, subsamples and computes normalisation statistics from
/// the training split. Fails with dataset_missing, dataset_corrupt or
/// checksum_mismatch.
DatasetSplits ingest_dataset(const DatasetDescriptor& desc);

/// Parses CIFAR binary records. `label_bytes` is 1 for CIFAR-10, 2 for
/// CIFAR-100 (coarse, fine; the fine label is used).
ImageSet parse_cifar_records(std::span<const std::uint8_t> bytes, int label_bytes, std::size_t num_classes);

/// Extracts regular files from a gzip-compressed tar archive in memory.
struct ArchiveEntry {
  std::string name;
  std::vector<std::uint8_t> data;
};
std::vector<ArchiveEntry> read_tar_gz(const std::filesystem::path& path);
std::vector<ArchiveEntry> parse_tar(std::span<const std::uint8_t> bytes);

std::string md5_file(const std::filesystem::path& path);
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);

/// Keeps round(fraction * count_c) samples of every class c, chosen at random.
/// The relative order of kept samples is preserved.
ImageSet stratified_subsample(const ImageSet& set, double fraction, Rng& rng);

Normalization channel_stats(const ImageSet& set);

/// Class-conditional images built from random low-frequency prototypes plus
/// pixel noise. Prototypes depend on `seed` only; `split` selects an
/// independent sample stream, so splits of one seed share their classes.
ImageSet synthetic_images(std::size_t count, std::size_t num_classes, std::size_t size, double noise,
                          std::uint64_t seed, std::uint64_t split = 0);

/// Normalised batch of the given samples. With `augment`, each image is
/// randomly cropped from a 4-pixel zero-padded copy and flipped
/// horizontally with probability 0.5, drawing from `rng`.
template <typename T>
Batch<T> make_batch(const ImageSet& set, std::span<const std::size_t> indices, const Normalization& norm,
                    bool augment = false, Rng* rng = nullptr);

/// All samples in order, no augmentation.
template <typename T>
Batch<T> full_batch(const ImageSet& set, const Normalization& norm);

}  // namespace nfe
