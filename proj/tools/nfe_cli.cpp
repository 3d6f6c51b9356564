// SPDX-License-Identifier: Apache-2.0
// Command-line front end: plan, train, eval, sweep, plot, report.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "nfe/checkpoint.hpp"
#include "nfe/experiment.hpp"
#include "nfe/json_io.hpp"
#include "nfe/log.hpp"
#include "nfe/mask_io.hpp"
#include "nfe/plots.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> sparsity;
  std::optional<int> exits;
  std::optional<double> alpha;
  std::optional<double> temperature;
  std::optional<std::string> pai;
  std::optional<std::string> plan;
  std::optional<std::string> variant;
  std::optional<double> subsample;
  std::optional<int> epochs;
  std::optional<int> repeats;
  std::optional<std::string> dataset;
  std::optional<std::string> backbone;
  std::optional<std::size_t> batch_size;
  std::optional<std::string> config;
  std::optional<std::string> data_dir;
  std::optional<std::size_t> max_batches;

  void attach(CLI::App* app) {
    app->add_option("--seed", seed, "base random seed");
    app->add_option("--sparsity", sparsity, "pruning-at-initialisation sparsity S in [0, 1)");
    app->add_option("--exits", exits, "number of exits N");
    app->add_option("--alpha", alpha, "distillation weight");
    app->add_option("--temperature", temperature, "softening temperature");
    app->add_option("--pai", pai, "pruning method")->check(CLI::IsMember({"snip", "erk", "none"}));
    app->add_option("--plan", plan, "explicit groups per stage, e.g. 1,2,3");
    app->add_option("--variant", variant, "variant-name plan, e.g. Res*23");
    app->add_option("--subsample", subsample, "stratified training-set fraction");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--repeats", repeats, "number of seeds");
    app->add_option("--dataset", dataset, "cifar10, cifar100 or synthetic");
    app->add_option("--backbone", backbone, "small-resnet, mid-resnet or wide-resnet-like");
    app->add_option("--batch-size", batch_size, "mini-batch size");
    app->add_option("--config", config, "training config file (key = value)");
    app->add_option("--data-dir", data_dir, "dataset cache directory (default $NFE_DATA_DIR)");
    app->add_option("--max-batches", max_batches, "cap on batches per epoch");
  }

  void apply(nfe::ExperimentSpec& s) const {
    if (config) s.train = nfe::load_config(*config);
    if (backbone) s.backbone = *backbone;
    if (dataset) s.dataset.name = *dataset;
    if (data_dir) s.dataset.root = *data_dir;
    if (exits) nfe::apply_override(s, "exits", std::to_string(*exits));
    if (plan) nfe::apply_override(s, "plan", *plan);
    if (variant) nfe::apply_override(s, "variant", *variant);
    if (pai) s.pai.method = nfe::parse_pai_method(*pai);
    if (sparsity) {
      s.pai.sparsity = *sparsity;
      if (s.pai.sparsity > 0.0 && s.pai.method == nfe::PaiMethod::none && !pai) s.pai.method = nfe::PaiMethod::snip;
    }
    if (seed) s.train.seed = *seed;
    if (alpha) s.train.alpha = *alpha;
    if (temperature) s.train.temperature = *temperature;
    if (subsample) s.dataset.subsample = *subsample;
    if (epochs) s.train.epochs = *epochs;
    if (repeats) s.repeats = *repeats;
    if (batch_size) s.train.batch_size = *batch_size;
    if (max_batches) s.train.max_batches = *max_batches;
    s.validate();
  }
};

nfe::ExperimentSpec base_spec(const std::string& path) {
  return path.empty() ? nfe::ExperimentSpec{} : nfe::load_experiment(path);
}

std::vector<nfe::ExperimentResult> load_results(const std::vector<std::string>& inputs) {
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      for (const auto& e : fs::recursive_directory_iterator(in))
        if (e.is_regular_file() && e.path().filename() == "result.json") files.push_back(e.path());
    } else {
      files.emplace_back(in);
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) nfe::fail(nfe::ErrorKind::io, "no result.json files found");
  std::vector<nfe::ExperimentResult> out;
  for (const auto& f : files) {
    const auto bytes = nfe::read_file(f);
    try {
      out.push_back(nfe::ExperimentResult::from_json(json::parse(bytes.begin(), bytes.end())));
    } catch (const json::parse_error& e) {
      nfe::fail(nfe::ErrorKind::format, f.string() + ": " + e.what());
    }
  }
  return out;
}

int cmd_plan(const nfe::ExperimentSpec& spec, std::size_t classes, bool as_json) {
  const nfe::BackboneSpec b = spec.backbone_spec(classes, spec.dataset.name == "synthetic" ? spec.dataset.synthetic_size : 32);
  const nfe::FissionPlan plan = spec.resolve_plan(b.num_stages());
  const nfe::ExecutionDag dag = nfe::build_execution_dag(plan);
  nfe::Rng rng(spec.train.seed);
  const auto net = nfe::init_backbone<float>(b, rng);
  std::vector<nfe::StageMask> pai;
  nfe::PaiConfig pc = spec.pai;
  if (pc.method == nfe::PaiMethod::snip && pc.sparsity > 0.0) {
    // SNIP needs labelled data; plan inspection uses ERK topology instead.
    nfe::log::warn("plan: SNIP needs data; showing an ERK mask of the same sparsity");
    pc.method = nfe::PaiMethod::erk;
  }
  nfe::Rng pai_rng = rng.fork(11);
  pai = nfe::compute_pai_masks<float>(net, pc, {}, pai_rng);
  const auto masks = nfe::build_mask_set(plan, b.all_stage_shapes(), spec.train.seed, &pai, pc.sparsity);
  nfe::Rng head_rng = rng.fork(13);
  auto model = nfe::fission_transform(net, plan, masks, head_rng);
  const auto f = nfe::count_flops(model);

  json nodes = json::array();
  for (const auto& n : dag.nodes) nodes.push_back({{"stage", n.stage}, {"group", n.group}, {"parent", n.lineage}});
  const json out = {{"plan", nfe::to_json(plan)},
                    {"dag", {{"nodes", nodes}, {"exit_paths", dag.exit_paths}}},
                    {"flops",
                     {{"per_exit", f.per_exit},
                      {"total", f.total},
                      {"dense_reference", f.dense_reference},
                      {"ratio", f.ratio},
                      {"conv_ratio", f.conv_ratio}}},
                    {"parameters", f.parameters},
                    {"dense_parameters", f.dense_parameters}};
  if (as_json) {
    std::cout << out.dump(2) << "\n";
    return 0;
  }
  std::cout << "backbone " << b.family << ", " << b.num_stages() << " stages, " << plan.num_exits << " exits\n";
  std::cout << "groups per stage:";
  for (int g : plan.groups_per_stage) std::cout << " " << g;
  std::cout << "\nDAG nodes:\n";
  for (std::size_t i = 0; i < dag.nodes.size(); ++i)
    std::cout << "  [" << i << "] stage " << dag.nodes[i].stage << " group " << dag.nodes[i].group << " <- "
              << (dag.nodes[i].lineage < 0 ? std::string("stem") : std::to_string(dag.nodes[i].lineage)) << "\n";
  for (std::size_t j = 0; j < dag.exit_paths.size(); ++j) {
    std::cout << "  exit " << j + 1 << ":";
    for (int n : dag.exit_paths[j]) std::cout << " (" << dag.nodes[n].stage << "," << dag.nodes[n].group << ")";
    std::cout << "\n";
  }
  std::printf("FLOPs: total %.4g MACs, ratio %.3fx (conv-only %.3fx)\n", f.total, f.ratio, f.conv_ratio);
  std::printf("parameters: %zu (dense single model %zu)\n", f.parameters, f.dense_parameters);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Network fission ensembles: multi-exit training and evaluation"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "debug logging");

  std::string spec_path, out_dir, checkpoint, axis, values_csv, plot_dir;
  std::vector<std::string> results_in;
  bool as_json = false, use_double = false, no_ckpt = false;
  std::size_t classes = 10;

  Overrides plan_o, train_o, sweep_o, eval_o;
  auto* plan_cmd = app.add_subcommand("plan", "inspect fission plan, DAG and FLOPs without training");
  plan_cmd->add_option("--spec", spec_path, "experiment spec JSON");
  plan_cmd->add_option("--classes", classes, "class count");
  plan_cmd->add_flag("--json", as_json, "machine-readable output");
  plan_o.attach(plan_cmd);

  auto* train_cmd = app.add_subcommand("train", "train and evaluate an experiment");
  train_cmd->add_option("--spec", spec_path, "experiment spec JSON");
  train_cmd->add_option("--out", out_dir, "output directory")->default_val("runs");
  train_cmd->add_flag("--double", use_double, "64-bit arithmetic");
  train_cmd->add_flag("--no-checkpoint", no_ckpt, "skip checkpoint files");
  train_o.attach(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--spec", spec_path, "experiment spec JSON (dataset settings)");
  eval_cmd->add_flag("--json", as_json, "machine-readable output");
  eval_o.attach(eval_cmd);

  auto* sweep_cmd = app.add_subcommand("sweep", "one experiment per value of a spec field");
  sweep_cmd->add_option("--spec", spec_path, "experiment spec JSON");
  sweep_cmd->add_option("--axis", axis, "field to vary (sparsity, ratio, pai, exits, alpha, ...)")->required();
  sweep_cmd->add_option("--values", values_csv, "comma-separated values")->required();
  sweep_cmd->add_option("--out", out_dir, "output directory")->default_val("runs");
  sweep_cmd->add_flag("--double", use_double, "64-bit arithmetic");
  sweep_cmd->add_flag("--no-checkpoint", no_ckpt, "skip checkpoint files");
  sweep_o.attach(sweep_cmd);

  auto* plot_cmd = app.add_subcommand("plot", "SVG plots from result files");
  plot_cmd->add_option("results", results_in, "result.json files or directories")->required();
  plot_cmd->add_option("--out", plot_dir, "plot directory")->default_val("plots");

  auto* report_cmd = app.add_subcommand("report", "results table from result files");
  report_cmd->add_option("results", results_in, "result.json files or directories")->required();
  report_cmd->add_flag("--json", as_json, "machine-readable output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  if (verbose) nfe::log::set_min_level(nfe::log::Level::debug);

  try {
    if (*plan_cmd) {
      auto spec = base_spec(spec_path);
      plan_o.apply(spec);
      return cmd_plan(spec, classes, as_json);
    }
    if (*train_cmd) {
      auto spec = base_spec(spec_path);
      train_o.apply(spec);
      nfe::RunOptions opts{out_dir, !no_ckpt, use_double};
      const auto res = nfe::run_experiment(spec, opts);
      std::cout << nfe::format_results_table({res});
      return 0;
    }
    if (*eval_cmd) {
      auto spec = base_spec(spec_path);
      eval_o.apply(spec);
      json meta;
      auto model = nfe::load_checkpoint<float>(checkpoint, &meta);
      const auto data = nfe::ingest_dataset(spec.dataset);
      const auto report = nfe::evaluate(model, data.test, data.norm);
      if (as_json)
        std::cout << report.to_json().dump(2) << "\n";
      else
        std::cout << nfe::format_table({{fs::path(checkpoint).parent_path().filename().string(), report}},
                                       "spec " + meta.value("spec_hash", std::string("?")));
      return 0;
    }
    if (*sweep_cmd) {
      auto spec = base_spec(spec_path);
      sweep_o.apply(spec);
      nfe::SweepAxis ax{axis, {}};
      std::stringstream ss(values_csv);
      for (std::string v; std::getline(ss, v, ',');)
        if (!v.empty()) ax.values.push_back(v);
      const auto res = nfe::run_sweep(spec, ax, {out_dir, !no_ckpt, use_double});
      std::cout << nfe::format_results_table(res, axis);
      return 0;
    }
    if (*plot_cmd) {
      for (const auto& p : nfe::emit_plots(load_results(results_in), plot_dir)) std::cout << p.string() << "\n";
      return 0;
    }
    if (*report_cmd) {
      const auto res = load_results(results_in);
      if (as_json) {
        json arr = json::array();
        for (const auto& r : res) arr.push_back({{"spec_hash", r.spec_hash}, {"name", r.spec.name}, {"summary", r.summary.to_json()}});
        std::cout << arr.dump(2) << "\n";
      } else {
        std::cout << nfe::format_results_table(res);
      }
      return 0;
    }
  } catch (const nfe::Error& e) {
    std::cerr << json{{"error", nfe::to_string(e.kind())}, {"message", e.what()}}.dump() << "\n";
    return nfe::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "Internal"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
