// SPDX-License-Identifier: Apache-2.0
#include "nfe/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "nfe/checkpoint.hpp"
#include "nfe/json_io.hpp"
#include "nfe/log.hpp"
#include "nfe/mask_io.hpp"

namespace fs = std::filesystem;

namespace nfe {

namespace {

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) fail(ErrorKind::invalid_argument, key + ": expected a number, got '" + v + "'");
  return d;
}

int to_int(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d != std::floor(d)) fail(ErrorKind::invalid_argument, key + ": expected an integer, got '" + v + "'");
  return static_cast<int>(d);
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::istringstream in(v);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(to_int(key, item));
  return out;
}

nlohmann::json dataset_json(const DatasetDescriptor& d) {
  return {{"name", d.name},
          {"subsample", d.subsample},
          {"test_subsample", d.test_subsample},
          {"seed", d.seed},
          {"augment", d.augment},
          {"synthetic_train", d.synthetic_train},
          {"synthetic_test", d.synthetic_test},
          {"synthetic_classes", d.synthetic_classes},
          {"synthetic_size", d.synthetic_size},
          {"synthetic_noise", d.synthetic_noise}};
}

DatasetDescriptor dataset_from_json(const nlohmann::json& j) {
  DatasetDescriptor d;
  d.name = j.value("name", d.name);
  d.root = j.value("root", d.root);
  d.subsample = j.value("subsample", d.subsample);
  d.test_subsample = j.value("test_subsample", d.test_subsample);
  d.seed = j.value("seed", d.seed);
  d.augment = j.value("augment", d.augment);
  d.synthetic_train = j.value("synthetic_train", d.synthetic_train);
  d.synthetic_test = j.value("synthetic_test", d.synthetic_test);
  d.synthetic_classes = j.value("synthetic_classes", d.synthetic_classes);
  d.synthetic_size = j.value("synthetic_size", d.synthetic_size);
  d.synthetic_noise = j.value("synthetic_noise", d.synthetic_noise);
  return d;
}

nlohmann::json mean_std_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}, {"n", m.n}}; }

double mean_pairwise(const std::vector<std::vector<double>>& m) {
  double s = 0;
  std::size_t n = 0;
  for (std::size_t a = 0; a < m.size(); ++a)
    for (std::size_t b = a + 1; b < m.size(); ++b, ++n) s += m[a][b];
  return n ? s / static_cast<double>(n) : 0.0;
}

template <typename T>
std::vector<Batch<T>> saliency_batches(const DatasetSplits& data, const PaiConfig& cfg, Rng rng) {
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order.begin(), order.end());
  std::vector<Batch<T>> out;
  for (int b = 0; b < cfg.saliency_batches; ++b) {
    const std::size_t start = static_cast<std::size_t>(b) * cfg.saliency_batch_size;
    if (start >= order.size()) break;
    const std::size_t stop = std::min(order.size(), start + cfg.saliency_batch_size);
    out.push_back(make_batch<T>(data.train, std::span(order.data() + start, stop - start), data.norm));
  }
  return out;
}

template <typename T>
RunRecord run_seed(const ExperimentSpec& spec, const DatasetSplits& data, std::uint64_t seed, const fs::path& dir,
                   bool save_ckpt) {
  const BackboneSpec bspec = spec.backbone_spec(data.train.num_classes, data.train.height);
  const FissionPlan plan = spec.resolve_plan(bspec.num_stages());
  const Rng base(seed);

  Rng init_rng = base.fork(10);
  const BackboneWeights<T> net = init_backbone<T>(bspec, init_rng);

  Rng pai_rng = base.fork(11);
  std::vector<Batch<T>> sal;
  if (spec.pai.method == PaiMethod::snip && spec.pai.sparsity > 0.0)
    sal = saliency_batches<T>(data, spec.pai, base.fork(14));
  const std::vector<StageMask> pai = compute_pai_masks<T>(net, spec.pai, sal, pai_rng);
  const GroupMaskSet masks =
      build_mask_set(plan, bspec.all_stage_shapes(), splitmix64(seed ^ 0x6d61736bULL), &pai, spec.pai.sparsity);

  Rng head_rng = base.fork(13);
  MultiExitModel<T> model = fission_transform(net, plan, masks, head_rng);

  TrainConfig tc = spec.train;
  tc.seed = seed;
  tc.augment = tc.augment && spec.dataset.augment;
  TrainHooks hooks;
  if (!dir.empty()) {
    fs::create_directories(dir);
    hooks.log_path = dir / "train.jsonl";
  }
  RunRecord rec;
  rec.seed = seed;
  rec.epochs = train(model, data, tc, hooks).epochs;
  rec.report = evaluate(model, data.test, data.norm);
  rec.flops = count_flops(model);
  if (!dir.empty()) {
    if (save_ckpt) {
      const nlohmann::json meta = {{"seed", seed}, {"pai_method", to_string(spec.pai.method)}, {"spec_hash", spec.hash()}};
      save_checkpoint(dir / "model.ckpt", model, meta);
      rec.checkpoint = (dir / "model.ckpt").string();
    }
    std::ofstream(dir / "report.json") << rec.to_json().dump(2) << "\n";
  }
  log::info("seed " + std::to_string(seed) + ": ensemble accuracy " + std::to_string(rec.report.ensemble_accuracy));
  return rec;
}

}  // namespace

void ExperimentSpec::validate() const {
  require(repeats >= 1, "repeats must be >= 1");
  require(exits >= 1, "exits must be >= 1");
  pai.validate();
  train.validate();
}

BackboneSpec ExperimentSpec::backbone_spec(std::size_t num_classes, std::size_t image_size) const {
  BackboneSpec s = make_backbone(backbone, num_classes, depth, width);
  s.image_size = image_size;
  s.validate();
  return s;
}

FissionPlan ExperimentSpec::resolve_plan(int num_stages) const {
  FissionPlan plan;
  if (!groups.empty())
    plan = custom_plan(exits, groups);
  else if (!variant.empty())
    plan = plan_from_variant(variant);
  else
    plan = default_plan(exits, num_stages);
  if (plan.num_stages != num_stages)
    fail(ErrorKind::invalid_argument, "plan has " + std::to_string(plan.num_stages) + " stages but the backbone has " +
                                          std::to_string(num_stages));
  if (!ratios.empty()) plan = custom_plan(plan.num_exits, plan.groups_per_stage, ratios);
  return plan;
}

nlohmann::json ExperimentSpec::to_json() const {
  return {{"name", name},
          {"backbone", backbone},
          {"depth", depth},
          {"width", width},
          {"dataset", dataset_json(dataset)},
          {"exits", exits},
          {"groups", groups},
          {"variant", variant},
          {"ratios", ratios},
          {"pai",
           {{"method", to_string(pai.method)},
            {"sparsity", pai.sparsity},
            {"saliency_batches", pai.saliency_batches},
            {"saliency_batch_size", pai.saliency_batch_size}}},
          {"train", nfe::to_json(train)},
          {"repeats", repeats}};
}

ExperimentSpec ExperimentSpec::from_json(const nlohmann::json& j) {
  ExperimentSpec s;
  try {
    s.name = j.value("name", s.name);
    s.backbone = j.value("backbone", s.backbone);
    s.depth = j.value("depth", s.depth);
    s.width = j.value("width", s.width);
    if (j.contains("dataset")) s.dataset = dataset_from_json(j.at("dataset"));
    s.exits = j.value("exits", s.exits);
    s.groups = j.value("groups", s.groups);
    s.variant = j.value("variant", s.variant);
    s.ratios = j.value("ratios", s.ratios);
    if (j.contains("pai")) {
      const auto& p = j.at("pai");
      s.pai.method = parse_pai_method(p.value("method", std::string("none")));
      s.pai.sparsity = p.value("sparsity", 0.0);
      s.pai.saliency_batches = p.value("saliency_batches", 1);
      s.pai.saliency_batch_size = p.value("saliency_batch_size", std::size_t{128});
    }
    if (j.contains("train")) s.train = train_config_from_json(j.at("train"));
    s.repeats = j.value("repeats", s.repeats);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("experiment spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::string ExperimentSpec::hash() const { return sha256_hex(to_json().dump()).substr(0, 16); }

ExperimentSpec load_experiment(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return ExperimentSpec::from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::format, path.string() + ": " + e.what());
  }
}

void apply_override(ExperimentSpec& s, const std::string& key, const std::string& v) {
  if (key == "sparsity") {
    s.pai.sparsity = to_double(key, v);
    if (s.pai.sparsity > 0.0 && s.pai.method == PaiMethod::none) s.pai.method = PaiMethod::snip;
  } else if (key == "pai") {
    s.pai.method = parse_pai_method(v);
  } else if (key == "ratio") {
    const double r = to_double(key, v);
    require(r > 0.0 && r < 1.0, "ratio must lie in (0, 1)");
    const FissionPlan plan = s.resolve_plan(s.backbone_spec(10, 32).num_stages());
    s.ratios.clear();
    for (int g : plan.groups_per_stage) {
      if (g == 2)
        s.ratios.push_back({r, 1.0 - r});
      else
        s.ratios.emplace_back(static_cast<std::size_t>(g), 1.0 / g);
    }
  } else if (key == "exits") {
    s.exits = to_int(key, v);
    s.groups.clear();
    s.variant.clear();
    s.ratios.clear();
  } else if (key == "plan") {
    s.groups = parse_int_list(key, v);
    s.ratios.clear();
  } else if (key == "variant") {
    s.variant = v;
    s.groups.clear();
    s.ratios.clear();
  } else if (key == "alpha") {
    s.train.alpha = to_double(key, v);
  } else if (key == "temperature") {
    s.train.temperature = to_double(key, v);
  } else if (key == "seed") {
    s.train.seed = static_cast<std::uint64_t>(to_int(key, v));
  } else if (key == "epochs") {
    s.train.epochs = to_int(key, v);
  } else if (key == "repeats") {
    s.repeats = to_int(key, v);
  } else if (key == "subsample") {
    s.dataset.subsample = to_double(key, v);
  } else if (key == "backbone") {
    s.backbone = v;
  } else if (key == "dataset") {
    s.dataset.name = v;
  } else if (key == "batch_size") {
    s.train.batch_size = static_cast<std::size_t>(to_int(key, v));
  } else if (key == "lr") {
    s.train.lr_initial = to_double(key, v);
  } else {
    fail(ErrorKind::invalid_argument, "unknown override key '" + key + "'");
  }
}

nlohmann::json RunRecord::to_json() const {
  nlohmann::json log = nlohmann::json::array();
  for (const auto& e : epochs) log.push_back(e.to_json());
  return {{"seed", seed},
          {"report", report.to_json()},
          {"flops",
           {{"per_exit", flops.per_exit},
            {"total", flops.total},
            {"dense_reference", flops.dense_reference},
            {"conv_ratio", flops.conv_ratio},
            {"ratio", flops.ratio},
            {"parameters", flops.parameters},
            {"dense_parameters", flops.dense_parameters}}},
          {"epochs", log},
          {"checkpoint", checkpoint}};
}

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd m;
  m.n = xs.size();
  if (xs.empty()) return m;
  m.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0;
    for (double x : xs) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return m;
}

Aggregate aggregate(const std::vector<RunRecord>& runs) {
  Aggregate a;
  if (runs.empty()) return a;
  auto collect = [&](auto f) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(f(r));
    return mean_std(v);
  };
  a.ensemble_accuracy = collect([](const RunRecord& r) { return r.report.ensemble_accuracy; });
  a.nll = collect([](const RunRecord& r) { return r.report.nll; });
  a.ece = collect([](const RunRecord& r) { return r.report.ece; });
  a.pd = collect([](const RunRecord& r) { return mean_pairwise(r.report.pairwise_pd); });
  a.cs = collect([](const RunRecord& r) { return mean_pairwise(r.report.pairwise_cs); });
  for (std::size_t j = 0; j < runs.front().report.per_exit_accuracy.size(); ++j)
    a.exit_accuracy.push_back(collect([j](const RunRecord& r) { return r.report.per_exit_accuracy.at(j); }));
  a.flops_ratio = collect([](const RunRecord& r) { return r.flops.ratio; }).mean;
  return a;
}

nlohmann::json Aggregate::to_json() const {
  nlohmann::json ex = nlohmann::json::array();
  for (const auto& m : exit_accuracy) ex.push_back(mean_std_json(m));
  return {{"ensemble_accuracy", mean_std_json(ensemble_accuracy)},
          {"exit_accuracy", ex},
          {"nll", mean_std_json(nll)},
          {"ece", mean_std_json(ece)},
          {"pd", mean_std_json(pd)},
          {"cs", mean_std_json(cs)},
          {"flops_ratio", flops_ratio}};
}

nlohmann::json ExperimentResult::to_json() const {
  nlohmann::json r = nlohmann::json::array();
  for (const auto& run : runs) r.push_back(run.to_json());
  return {{"spec", spec.to_json()}, {"spec_hash", spec_hash}, {"runs", r}, {"summary", summary.to_json()}};
}

ExperimentResult ExperimentResult::from_json(const nlohmann::json& j) {
  ExperimentResult res;
  try {
    res.spec = ExperimentSpec::from_json(j.at("spec"));
    res.spec_hash = j.at("spec_hash").get<std::string>();
    for (const auto& r : j.at("runs")) {
      RunRecord rec;
      rec.seed = r.at("seed").get<std::uint64_t>();
      rec.report = EvalReport::from_json(r.at("report"));
      const auto& f = r.at("flops");
      rec.flops.per_exit = f.at("per_exit").get<std::vector<double>>();
      rec.flops.total = f.at("total").get<double>();
      rec.flops.dense_reference = f.at("dense_reference").get<double>();
      rec.flops.conv_ratio = f.at("conv_ratio").get<double>();
      rec.flops.ratio = f.at("ratio").get<double>();
      rec.flops.parameters = f.at("parameters").get<std::size_t>();
      rec.flops.dense_parameters = f.at("dense_parameters").get<std::size_t>();
      rec.checkpoint = r.value("checkpoint", std::string());
      res.runs.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("experiment result: ") + e.what());
  }
  res.summary = aggregate(res.runs);
  return res;
}

ExperimentResult run_experiment(const ExperimentSpec& spec, const DatasetSplits& data, const RunOptions& opts) {
  spec.validate();
  ExperimentResult res;
  res.spec = spec;
  res.spec_hash = spec.hash();
  const fs::path root = opts.output_dir.empty() ? fs::path() : opts.output_dir / (spec.name + "-" + res.spec_hash);
  for (int r = 0; r < spec.repeats; ++r) {
    const std::uint64_t seed = spec.train.seed + static_cast<std::uint64_t>(r);
    const fs::path dir = root.empty() ? fs::path() : root / ("seed" + std::to_string(seed));
    res.runs.push_back(opts.double_precision ? run_seed<double>(spec, data, seed, dir, opts.save_checkpoints)
                                             : run_seed<float>(spec, data, seed, dir, opts.save_checkpoints));
  }
  res.summary = aggregate(res.runs);
  if (!root.empty()) std::ofstream(root / "result.json") << res.to_json().dump(2) << "\n";
  return res;
}

ExperimentResult run_experiment(const ExperimentSpec& spec, const RunOptions& opts) {
  spec.validate();
  return run_experiment(spec, ingest_dataset(spec.dataset), opts);
}

std::vector<ExperimentResult> run_sweep(const ExperimentSpec& base, const SweepAxis& axis, const RunOptions& opts) {
  require(!axis.values.empty(), "sweep needs at least one value");
  std::vector<ExperimentSpec> specs;
  for (const auto& v : axis.values) {
    ExperimentSpec s = base;
    apply_override(s, axis.key, v);
    s.name = base.name + "-" + axis.key + "-" + v;
    s.validate();
    specs.push_back(std::move(s));
  }
  const DatasetSplits data = ingest_dataset(base.dataset);
  std::vector<ExperimentResult> out;
  for (const auto& s : specs) out.push_back(run_experiment(s, data, opts));
  return out;
}

std::string format_results_table(const std::vector<ExperimentResult>& results, const std::string& label_key) {
  std::ostringstream os;
  os << "# spec hashes:";
  for (const auto& r : results) os << " " << r.spec_hash;
  os << "\n";
  char line[320];
  std::snprintf(line, sizeof line, "%-30s %-16s %5s %16s %16s %16s %7s %7s %7s\n", "config", "spec", "runs",
                "ens acc (%)", "exit1 acc (%)", "NLL", "ECE", "PD", "FLOPs");
  os << line;
  for (const auto& r : results) {
    std::string label = r.spec.name;
    if (!label_key.empty()) label = label_key + "=" + r.spec.name.substr(r.spec.name.rfind('-') + 1);
    const auto& s = r.summary;
    char acc[32], ex1[32], nll_s[32];
    std::snprintf(acc, sizeof acc, "%.2f +- %.2f", 100 * s.ensemble_accuracy.mean, 100 * s.ensemble_accuracy.std);
    if (!s.exit_accuracy.empty())
      std::snprintf(ex1, sizeof ex1, "%.2f +- %.2f", 100 * s.exit_accuracy[0].mean, 100 * s.exit_accuracy[0].std);
    else
      std::snprintf(ex1, sizeof ex1, "-");
    std::snprintf(nll_s, sizeof nll_s, "%.3f +- %.3f", s.nll.mean, s.nll.std);
    std::snprintf(line, sizeof line, "%-30s %-16s %5zu %16s %16s %16s %7.3f %7.3f %6.2fx\n", label.c_str(),
                  r.spec_hash.c_str(), r.runs.size(), acc, ex1, nll_s, s.ece.mean, s.pd.mean, s.flops_ratio);
    os << line;
  }
  return os.str();
}

}  // namespace nfe
