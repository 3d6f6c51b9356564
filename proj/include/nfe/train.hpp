// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nfe/dataset.hpp"
#include "nfe/loss.hpp"
#include "nfe/model.hpp"

namespace nfe {

enum class LrSchedule { milestone_decay, half_then_linear, constant };

const char* to_string(LrSchedule s) noexcept;
LrSchedule parse_schedule(const std::string& s);

struct TrainConfig {
  double momentum = 0.9;
  double lr_initial = 0.1;
  LrSchedule lr_schedule = LrSchedule::milestone_decay;
  std::vector<int> milestones{75, 130, 180};
  double weight_decay = 5e-4;
  std::size_t batch_size = 128;
  int epochs = 200;
  double alpha = 1.0;
  double temperature = 3.0;
  std::uint64_t seed = 0;
  bool soften_ce = false;
  bool scale_kl_by_t2 = false;
  bool detach_teacher = true;
  bool augment = true;
  /// Reserved; training refuses to start when set.
  bool cutmix = false;
  /// Stop each epoch after this many batches (0 = full epoch).
  std::size_t max_batches = 0;

  void validate() const;
  LossOptions loss_options() const;
};

/// Learning rate for a 0-based epoch.
double lr_at(int epoch, const TrainConfig& cfg);

/// Human-readable `key = value` form, one field per line, '#' comments.
std::string format_config(const TrainConfig& cfg);
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path);

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double loss = 0;                    // mean total objective per batch
  std::vector<double> exit_loss;      // CE_i + alpha * KL_i
  std::vector<double> exit_ce;
  std::vector<double> exit_kl;        // unweighted KL(q_i || q_E)
  std::vector<double> exit_accuracy;  // training accuracy of each exit
  double ensemble_accuracy = 0;
  double seconds = 0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  /// Total objective of every optimisation step, in order.
  std::vector<double> step_losses;
};

struct TrainHooks {
  /// Called after each epoch; the record is already appended to the log.
  std::function<void(const EpochRecord&)> on_epoch;
  /// Line-delimited JSON epoch log; empty disables it.
  std::filesystem::path log_path;
};

/// Momentum SGD over every parameter. Weight decay is applied only to
/// retained positions, and pruned positions are reset to zero after each
/// step. Fails with ErrorKind::diverged on a non-finite loss.
template <typename T>
TrainResult train(MultiExitModel<T>& model, const DatasetSplits& data, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

/// One optimisation step on a batch: forward, loss, backward, update.
template <typename T>
class Trainer {
 public:
  Trainer(MultiExitModel<T>& model, const TrainConfig& cfg);

  LossResult<T> step(const Batch<T>& batch, double lr);

  /// Exit logits of the most recent step (train-mode forward).
  const std::vector<Tensor<T>>& last_logits() const { return exec_.logits(); }
  /// Effective KL multiplier: alpha, times T^2 when that scaling is on.
  double kl_weight() const noexcept;

 private:
  MultiExitModel<T>* model_;
  TrainConfig cfg_;
  Executor<T> exec_;
  std::vector<ParamRef<T>> params_;
  std::vector<Tensor<T>> velocity_;
};

}  // namespace nfe
