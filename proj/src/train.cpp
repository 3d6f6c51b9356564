// SPDX-License-Identifier: Apache-2.0
#include "nfe/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "nfe/log.hpp"
#include "nfe/mask_io.hpp"
#include "nfe/metrics.hpp"

namespace nfe {

const char* to_string(LrSchedule s) noexcept {
  switch (s) {
    case LrSchedule::milestone_decay: return "milestone_decay";
    case LrSchedule::half_then_linear: return "half_then_linear";
    case LrSchedule::constant: return "constant";
  }
  return "?";
}

LrSchedule parse_schedule(const std::string& s) {
  if (s == "milestone_decay") return LrSchedule::milestone_decay;
  if (s == "half_then_linear" || s == "half-then-linear") return LrSchedule::half_then_linear;
  if (s == "constant") return LrSchedule::constant;
  fail(ErrorKind::invalid_argument, "unknown learning-rate schedule '" + s + "'");
}

void TrainConfig::validate() const {
  require(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
  require(lr_initial > 0.0, "lr_initial must be positive");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(epochs >= 1, "epochs must be >= 1");
  require(alpha >= 0.0, "alpha must be non-negative");
  require(temperature > 0.0, "temperature must be positive");
  require(!cutmix, "cutmix augmentation is not available");
  require(std::is_sorted(milestones.begin(), milestones.end()), "milestones must be ascending");
}

LossOptions TrainConfig::loss_options() const {
  LossOptions o;
  o.alpha = alpha;
  o.temperature = temperature;
  o.soften_ce = soften_ce;
  o.scale_kl_by_t2 = scale_kl_by_t2;
  o.detach_teacher = detach_teacher;
  return o;
}

double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs)
    fail(ErrorKind::invalid_argument,
         "epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + ")");
  const double lr0 = cfg.lr_initial;
  switch (cfg.lr_schedule) {
    case LrSchedule::constant: return lr0;
    case LrSchedule::milestone_decay: {
      const auto passed = std::count_if(cfg.milestones.begin(), cfg.milestones.end(), [&](int m) { return epoch >= m; });
      return lr0 * std::pow(10.0, -static_cast<double>(passed));
    }
    case LrSchedule::half_then_linear: {
      const double f = static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
      if (f < 0.5) return lr0;
      if (f >= 0.9) return 0.01 * lr0;
      return lr0 * (0.1 + (0.01 - 0.1) * (f - 0.5) / 0.4);
    }
  }
  return lr0;
}

// ---------------------------------------------------------------------------
// key = value configuration

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  fail(ErrorKind::format, key + ": expected a boolean, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) fail(ErrorKind::format, key + ": expected a number, got '" + v + "'");
  return d;
}

long long parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) fail(ErrorKind::format, key + ": expected an integer, got '" + v + "'");
  return x;
}

std::string format_double(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

}  // namespace

std::string format_config(const TrainConfig& c) {
  std::ostringstream os;
  os << "# training configuration\n";
  os << "momentum = " << format_double(c.momentum) << "\n";
  os << "lr_initial = " << format_double(c.lr_initial) << "\n";
  os << "lr_schedule = " << to_string(c.lr_schedule) << "\n";
  os << "milestones = ";
  for (std::size_t i = 0; i < c.milestones.size(); ++i) os << (i ? "," : "") << c.milestones[i];
  os << "\n";
  os << "weight_decay = " << format_double(c.weight_decay) << "\n";
  os << "batch_size = " << c.batch_size << "\n";
  os << "epochs = " << c.epochs << "\n";
  os << "alpha = " << format_double(c.alpha) << "\n";
  os << "temperature = " << format_double(c.temperature) << "\n";
  os << "seed = " << c.seed << "\n";
  os << "soften_ce = " << (c.soften_ce ? "true" : "false") << "\n";
  os << "scale_kl_by_t2 = " << (c.scale_kl_by_t2 ? "true" : "false") << "\n";
  os << "detach_teacher = " << (c.detach_teacher ? "true" : "false") << "\n";
  os << "augment = " << (c.augment ? "true" : "false") << "\n";
  os << "cutmix = " << (c.cutmix ? "true" : "false") << "\n";
  os << "max_batches = " << c.max_batches << "\n";
  return os.str();
}

TrainConfig parse_config(const std::string& text, TrainConfig c) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::format, "line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (key == "momentum") c.momentum = parse_double(key, v);
    else if (key == "lr_initial") c.lr_initial = parse_double(key, v);
    else if (key == "lr_schedule") c.lr_schedule = parse_schedule(v);
    else if (key == "milestones") {
      c.milestones.clear();
      std::istringstream ms(v);
      std::string item;
      while (std::getline(ms, item, ','))
        if (!trim(item).empty()) c.milestones.push_back(static_cast<int>(parse_int(key, trim(item))));
    } else if (key == "weight_decay") c.weight_decay = parse_double(key, v);
    else if (key == "batch_size") c.batch_size = static_cast<std::size_t>(parse_int(key, v));
    else if (key == "epochs") c.epochs = static_cast<int>(parse_int(key, v));
    else if (key == "alpha") c.alpha = parse_double(key, v);
    else if (key == "temperature") c.temperature = parse_double(key, v);
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_int(key, v));
    else if (key == "soften_ce") c.soften_ce = parse_bool(key, v);
    else if (key == "scale_kl_by_t2") c.scale_kl_by_t2 = parse_bool(key, v);
    else if (key == "detach_teacher") c.detach_teacher = parse_bool(key, v);
    else if (key == "augment") c.augment = parse_bool(key, v);
    else if (key == "cutmix") c.cutmix = parse_bool(key, v);
    else if (key == "max_batches") c.max_batches = static_cast<std::size_t>(parse_int(key, v));
    else fail(ErrorKind::format, "line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_config(std::string(bytes.begin(), bytes.end()));
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"momentum", c.momentum},
          {"lr_initial", c.lr_initial},
          {"lr_schedule", to_string(c.lr_schedule)},
          {"milestones", c.milestones},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"alpha", c.alpha},
          {"temperature", c.temperature},
          {"seed", c.seed},
          {"soften_ce", c.soften_ce},
          {"scale_kl_by_t2", c.scale_kl_by_t2},
          {"detach_teacher", c.detach_teacher},
          {"augment", c.augment},
          {"cutmix", c.cutmix},
          {"max_batches", c.max_batches}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.momentum = j.value("momentum", c.momentum);
    c.lr_initial = j.value("lr_initial", c.lr_initial);
    if (j.contains("lr_schedule")) c.lr_schedule = parse_schedule(j.at("lr_schedule").get<std::string>());
    c.milestones = j.value("milestones", c.milestones);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.alpha = j.value("alpha", c.alpha);
    c.temperature = j.value("temperature", c.temperature);
    c.seed = j.value("seed", c.seed);
    c.soften_ce = j.value("soften_ce", c.soften_ce);
    c.scale_kl_by_t2 = j.value("scale_kl_by_t2", c.scale_kl_by_t2);
    c.detach_teacher = j.value("detach_teacher", c.detach_teacher);
    c.augment = j.value("augment", c.augment);
    c.cutmix = j.value("cutmix", c.cutmix);
    c.max_batches = j.value("max_batches", c.max_batches);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("train config: ") + e.what());
  }
  return c;
}

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch},
          {"lr", lr},
          {"loss", loss},
          {"exit_loss", exit_loss},
          {"exit_ce", exit_ce},
          {"exit_kl", exit_kl},
          {"exit_accuracy", exit_accuracy},
          {"ensemble_accuracy", ensemble_accuracy},
          {"seconds", seconds}};
}

// ---------------------------------------------------------------------------
// optimisation

template <typename T>
Trainer<T>::Trainer(MultiExitModel<T>& model, const TrainConfig& cfg)
    : model_(&model), cfg_(cfg), exec_(model), params_(parameters(model)) {
  cfg_.validate();
  for (const auto& p : params_) velocity_.emplace_back(p.param->value.shape());
}

template <typename T>
LossResult<T> Trainer<T>::step(const Batch<T>& batch, double lr) {
  zero_grad(*model_);
  const auto& logits = exec_.forward(batch.x, Mode::train, true);
  LossResult<T> loss = nfe_loss<T>(logits, batch.labels, cfg_.loss_options(), true);
  if (!std::isfinite(loss.total)) return loss;
  exec_.backward(loss.grad);

  const T mu = static_cast<T>(cfg_.momentum);
  const T wd = static_cast<T>(cfg_.weight_decay);
  const T step = static_cast<T>(lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Param<T>& p = *params_[i].param;
    const Mask* keep = params_[i].keep;
    T* w = p.value.data();
    const T* g = p.grad.data();
    T* v = velocity_[i].data();
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      if (keep && !(*keep)[k]) {
        v[k] = T{0};
        continue;
      }
      v[k] = mu * v[k] + g[k] + wd * w[k];
      w[k] -= step * v[k];
    }
  }
  enforce_masks(*model_);
  return loss;
}

template <typename T>
double Trainer<T>::kl_weight() const noexcept {
  return cfg_.alpha * (cfg_.scale_kl_by_t2 ? cfg_.temperature * cfg_.temperature : 1.0);
}

template <typename T>
TrainResult train(MultiExitModel<T>& model, const DatasetSplits& data, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  cfg.validate();
  require(data.train.size() > 0, "training split is empty");
  Trainer<T> trainer(model, cfg);
  Rng order_rng = Rng(cfg.seed).fork(2);
  Rng aug_rng = Rng(cfg.seed).fork(3);
  const std::size_t n_exits = static_cast<std::size_t>(model.num_exits());

  std::ofstream log_file;
  if (!hooks.log_path.empty()) {
    if (hooks.log_path.has_parent_path()) std::filesystem::create_directories(hooks.log_path.parent_path());
    log_file.open(hooks.log_path);
    if (!log_file) fail(ErrorKind::io, "cannot write " + hooks.log_path.string());
  }

  TrainResult result;
  std::vector<std::size_t> order(data.train.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    order_rng.shuffle(order.begin(), order.end());
    const double lr = lr_at(epoch, cfg);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.exit_loss.assign(n_exits, 0.0);
    rec.exit_ce.assign(n_exits, 0.0);
    rec.exit_kl.assign(n_exits, 0.0);
    rec.exit_accuracy.assign(n_exits, 0.0);
    std::vector<std::size_t> correct(n_exits, 0);
    std::size_t ens_correct = 0, seen = 0, steps = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      if (cfg.max_batches && steps >= cfg.max_batches) break;
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      const Batch<T> batch = make_batch<T>(data.train, idx, data.norm, cfg.augment, &aug_rng);
      const LossResult<T> loss = trainer.step(batch, lr);
      if (!std::isfinite(loss.total))
        fail(ErrorKind::diverged, "loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                                      std::to_string(steps) + " (lr " + std::to_string(lr) + ")");
      result.step_losses.push_back(loss.total);
      rec.loss += loss.total;
      for (std::size_t j = 0; j < n_exits; ++j) {
        rec.exit_ce[j] += loss.ce[j];
        rec.exit_kl[j] += loss.kl[j];
      }
      // Accuracy on the train-mode outputs that produced this step's loss.
      const auto& logits = trainer.last_logits();
      for (std::size_t j = 0; j < n_exits; ++j) {
        const auto pred = argmax_rows(logits[j]);
        for (std::size_t i = 0; i < pred.size(); ++i) correct[j] += pred[i] == batch.labels[i];
      }
      const auto ens = argmax_rows(ensemble_logits<T>(logits));
      for (std::size_t i = 0; i < ens.size(); ++i) ens_correct += ens[i] == batch.labels[i];
      ++steps;
      seen += idx.size();
    }

    const double inv_steps = 1.0 / static_cast<double>(std::max<std::size_t>(1, steps));
    rec.loss *= inv_steps;
    for (std::size_t j = 0; j < n_exits; ++j) {
      rec.exit_ce[j] *= inv_steps;
      rec.exit_kl[j] *= inv_steps;
      rec.exit_loss[j] = rec.exit_ce[j] + trainer.kl_weight() * rec.exit_kl[j];
      rec.exit_accuracy[j] = static_cast<double>(correct[j]) / static_cast<double>(std::max<std::size_t>(1, seen));
    }
    rec.ensemble_accuracy = static_cast<double>(ens_correct) / static_cast<double>(std::max<std::size_t>(1, seen));
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(rec);
    if (log_file.is_open()) {
      log_file << rec.to_json().dump() << "\n";
      log_file.flush();
    }
    log::info("epoch " + std::to_string(epoch) + " lr " + std::to_string(lr) + " loss " + std::to_string(rec.loss) +
              " ens-acc " + std::to_string(rec.ensemble_accuracy));
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  return result;
}

template class Trainer<float>;
template class Trainer<double>;
template TrainResult train<float>(MultiExitModel<float>&, const DatasetSplits&, const TrainConfig&, const TrainHooks&);
template TrainResult train<double>(MultiExitModel<double>&, const DatasetSplits&, const TrainConfig&,
                                   const TrainHooks&);

}  // namespace nfe
