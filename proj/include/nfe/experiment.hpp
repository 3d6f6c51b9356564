// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "nfe/dataset.hpp"
#include "nfe/metrics.hpp"
#include "nfe/pai.hpp"
#include "nfe/train.hpp"

namespace nfe {

struct ExperimentSpec {
  std::string name = "nfe";
  std::string backbone = "small-resnet";
  int depth = 0;  // 0 = family default
  int width = 0;
  DatasetDescriptor dataset;
  int exits = 2;
  /// Explicit groups per stage; empty selects the countdown default.
  std::vector<int> groups;
  /// Variant-name sugar, used when non-empty and `groups` is empty.
  std::string variant;
  /// Per-stage group ratios; empty means balanced.
  std::vector<std::vector<double>> ratios;
  PaiConfig pai;
  TrainConfig train;
  int repeats = 3;

  void validate() const;
  BackboneSpec backbone_spec(std::size_t num_classes, std::size_t image_size) const;
  FissionPlan resolve_plan(int num_stages) const;

  nlohmann::json to_json() const;
  static ExperimentSpec from_json(const nlohmann::json& j);
  /// SHA-256 of the canonical JSON form, first 16 hex digits.
  std::string hash() const;
};

ExperimentSpec load_experiment(const std::filesystem::path& path);

/// Applies `key=value` to a spec. Keys: sparsity, ratio, pai, exits, alpha,
/// temperature, seed, epochs, plan, variant, repeats, subsample, backbone,
/// dataset, batch_size, lr. `ratio=r` sets [r, 1-r] on every two-group stage.
void apply_override(ExperimentSpec& spec, const std::string& key, const std::string& value);

struct RunRecord {
  std::uint64_t seed = 0;
  EvalReport report;
  FlopsReport flops;
  std::vector<EpochRecord> epochs;
  std::string checkpoint;

  nlohmann::json to_json() const;
};

struct MeanStd {
  double mean = 0;
  double std = 0;  // sample standard deviation (n - 1), 0 for n = 1
  std::size_t n = 0;
};
MeanStd mean_std(const std::vector<double>& xs);

struct Aggregate {
  MeanStd ensemble_accuracy;
  std::vector<MeanStd> exit_accuracy;
  MeanStd nll;
  MeanStd ece;
  MeanStd pd;  // mean over exit pairs
  MeanStd cs;
  double flops_ratio = 0;

  nlohmann::json to_json() const;
};

Aggregate aggregate(const std::vector<RunRecord>& runs);

struct ExperimentResult {
  ExperimentSpec spec;
  std::string spec_hash;
  std::vector<RunRecord> runs;
  Aggregate summary;

  nlohmann::json to_json() const;
  static ExperimentResult from_json(const nlohmann::json& j);
};

struct RunOptions {
  /// Output directory for checkpoints, logs and the result JSON; empty
  /// disables all file output.
  std::filesystem::path output_dir;
  bool save_checkpoints = true;
  /// Use 64-bit arithmetic instead of 32-bit.
  bool double_precision = false;
};

/// Trains and evaluates `repeats` seeds (train.seed, train.seed + 1, ...).
ExperimentResult run_experiment(const ExperimentSpec& spec, const RunOptions& opts = {});
/// As above on already-ingested data.
ExperimentResult run_experiment(const ExperimentSpec& spec, const DatasetSplits& data, const RunOptions& opts = {});

struct SweepAxis {
  std::string key;
  std::vector<std::string> values;
};

/// One experiment per axis value; the dataset is ingested once.
std::vector<ExperimentResult> run_sweep(const ExperimentSpec& base, const SweepAxis& axis, const RunOptions& opts = {});

/// Mean +- std table, one row per result, headed by the spec hashes.
std::string format_results_table(const std::vector<ExperimentResult>& results, const std::string& label_key = {});

}  // namespace nfe
