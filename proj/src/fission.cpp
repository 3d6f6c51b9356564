// SPDX-License-Identifier: Apache-2.0
#include "nfe/fission.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "nfe/log.hpp"

namespace nfe {

void FissionPlan::validate() const {
  require(num_exits >= 1, "num_exits must be >= 1");
  require(num_stages >= 1, "num_stages must be >= 1");
  require(static_cast<int>(groups_per_stage.size()) == num_stages,
          "groups_per_stage must have one entry per stage");
  require(group_ratios.size() == groups_per_stage.size(), "group_ratios must have one entry per stage");
  require(groups_per_stage.front() == 1, "the first stage must hold a single group");
  for (std::size_t i = 0; i < groups_per_stage.size(); ++i) {
    const int g = groups_per_stage[i];
    require(g >= 1 && g <= num_exits,
            "stage " + std::to_string(i + 1) + " has " + std::to_string(g) + " groups; expected 1.." +
                std::to_string(num_exits));
    const auto& r = group_ratios[i];
    require(static_cast<int>(r.size()) == g,
            "stage " + std::to_string(i + 1) + " needs " + std::to_string(g) + " group ratios");
    double sum = 0.0;
    for (double p : r) {
      require(p >= 0.0 && p <= 1.0, "group ratios must lie in [0, 1]");
      sum += p;
    }
    require(std::abs(sum - 1.0) <= 1e-9, "group ratios of stage " + std::to_string(i + 1) + " must sum to 1");
  }
}

bool FissionPlan::monotone() const noexcept {
  return std::is_sorted(groups_per_stage.begin(), groups_per_stage.end());
}

namespace {

std::vector<std::vector<double>> uniform_ratios(const std::vector<int>& groups) {
  std::vector<std::vector<double>> r;
  r.reserve(groups.size());
  for (int g : groups) r.emplace_back(static_cast<std::size_t>(std::max(g, 1)), 1.0 / std::max(g, 1));
  return r;
}

}  // namespace

FissionPlan default_plan(int num_exits, int num_stages) {
  require(num_exits >= 1 && num_stages >= 1, "num_exits and num_stages must be positive");
  require(num_exits <= num_stages,
          "num_exits (" + std::to_string(num_exits) + ") exceeds num_stages (" + std::to_string(num_stages) +
              "): the countdown cannot end with a shared first stage");
  FissionPlan plan;
  plan.num_exits = num_exits;
  plan.num_stages = num_stages;
  for (int i = 1; i <= num_stages; ++i) plan.groups_per_stage.push_back(std::max(1, num_exits - (num_stages - i)));
  plan.group_ratios = uniform_ratios(plan.groups_per_stage);
  plan.validate();
  return plan;
}

FissionPlan custom_plan(int num_exits, std::vector<int> groups_per_stage, std::vector<std::vector<double>> ratios) {
  FissionPlan plan;
  plan.num_exits = num_exits;
  plan.num_stages = static_cast<int>(groups_per_stage.size());
  plan.group_ratios = ratios.empty() ? uniform_ratios(groups_per_stage) : std::move(ratios);
  plan.groups_per_stage = std::move(groups_per_stage);
  require(!plan.groups_per_stage.empty(), "plan needs at least one stage");
  plan.validate();
  return plan;
}

FissionPlan plan_from_variant(std::string_view name) {
  std::size_t start = 0;
  while (start < name.size() && std::isalpha(static_cast<unsigned char>(name[start]))) ++start;
  const std::string_view body = name.substr(start);
  require(!body.empty(), "variant name '" + std::string(name) + "' has no stage pattern");
  std::vector<int> groups;
  for (std::size_t i = 0; i < body.size(); ++i) {
    const char c = body[i];
    if (c == '*') {
      groups.push_back(1);
    } else if (std::isdigit(static_cast<unsigned char>(c))) {
      require(static_cast<std::size_t>(c - '0') == i + 1,
              "variant name '" + std::string(name) + "': digit " + std::string(1, c) + " at stage " +
                  std::to_string(i + 1));
      groups.push_back(i == 0 ? 1 : 2);
    } else {
      fail(ErrorKind::invalid_argument, "variant name '" + std::string(name) + "' contains '" + std::string(1, c) + "'");
    }
  }
  require(std::any_of(groups.begin(), groups.end(), [](int g) { return g == 2; }),
          "variant name '" + std::string(name) + "' never splits a stage");
  return custom_plan(2, std::move(groups));
}

StageMask ones_like(std::span<const Shape> shapes) {
  StageMask m;
  for (const auto& s : shapes) m.emplace_back(s, std::uint8_t{1});
  return m;
}

StageMask zeros_like(std::span<const Shape> shapes) {
  StageMask m;
  for (const auto& s : shapes) m.emplace_back(s, std::uint8_t{0});
  return m;
}

std::size_t count_ones(const StageMask& m) noexcept {
  std::size_t n = 0;
  for (const auto& t : m) n += count_ones(t);
  return n;
}

std::size_t stage_size(const StageMask& m) noexcept {
  std::size_t n = 0;
  for (const auto& t : m) n += t.size();
  return n;
}

std::vector<Shape> shapes_of(const StageMask& m) {
  std::vector<Shape> s;
  for (const auto& t : m) s.push_back(t.shape());
  return s;
}

void GroupMaskSet::verify() const {
  require(pai_masks.size() == group_masks.size(), "mask set: pai/group stage count mismatch");
  for (std::size_t i = 0; i < group_masks.size(); ++i) {
    const auto& p = pai_masks[i];
    const auto& groups = group_masks[i];
    require(!groups.empty(), "mask set: stage " + std::to_string(i + 1) + " has no groups");
    for (const auto& g : groups) {
      require(g.size() == p.size(), "mask set: layer count mismatch at stage " + std::to_string(i + 1));
      for (std::size_t l = 0; l < p.size(); ++l)
        if (!g[l].same_shape(p[l])) fail(ErrorKind::shape_mismatch, "mask set: layer shape mismatch");
    }
    for (std::size_t l = 0; l < p.size(); ++l) {
      for (std::size_t k = 0; k < p[l].size(); ++k) {
        const unsigned pv = p[l][k];
        require(pv <= 1, "mask set: non-binary pruning entry");
        unsigned sum = 0;
        for (const auto& g : groups) {
          require(g[l][k] <= 1, "mask set: non-binary group entry");
          sum += g[l][k];
        }
        require(sum <= 1, "mask set: groups overlap at stage " + std::to_string(i + 1));
        require(sum == pv, "mask set: groups do not partition the surviving weights at stage " +
                               std::to_string(i + 1));
      }
    }
  }
}

std::vector<StageMask> masks_from_assignment(std::span<const Shape> shapes, int num_groups,
                                             std::span<const int> assignment) {
  require(num_groups >= 1, "num_groups must be >= 1");
  std::size_t total = 0;
  for (const auto& s : shapes) total += numel(s);
  require(assignment.size() == total, "assignment length does not match the stage size");
  std::vector<StageMask> out(static_cast<std::size_t>(num_groups), zeros_like(shapes));
  std::size_t flat = 0;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const std::size_t n = numel(shapes[l]);
    for (std::size_t k = 0; k < n; ++k, ++flat) {
      const int g = assignment[flat];
      require(g >= 0 && g < num_groups, "assignment holds an out-of-range group");
      out[static_cast<std::size_t>(g)][l][k] = 1;
    }
  }
  return out;
}

std::vector<StageMask> partition_stage(std::span<const Shape> shapes, int num_groups, std::span<const double> ratios,
                                       Rng& rng) {
  require(num_groups >= 1, "num_groups must be >= 1");
  require(static_cast<int>(ratios.size()) == num_groups, "one ratio per group is required");
  double sum = 0.0;
  for (double r : ratios) {
    require(r >= 0.0, "group ratios must be non-negative");
    sum += r;
  }
  require(std::abs(sum - 1.0) <= 1e-9, "group ratios must sum to 1");

  if (num_groups == 1) return {ones_like(shapes)};
  std::vector<StageMask> out(static_cast<std::size_t>(num_groups), zeros_like(shapes));
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const std::size_t n = numel(shapes[l]);
    for (std::size_t k = 0; k < n; ++k) out[rng.categorical(ratios)][l][k] = 1;
  }
  return out;
}

std::vector<StageMask> apply_pai(const std::vector<StageMask>& group_masks, const StageMask& pai_mask) {
  std::vector<StageMask> out = group_masks;
  for (auto& g : out) {
    if (g.size() != pai_mask.size()) fail(ErrorKind::shape_mismatch, "apply_pai: layer count mismatch");
    for (std::size_t l = 0; l < g.size(); ++l) {
      if (!g[l].same_shape(pai_mask[l]))
        fail(ErrorKind::shape_mismatch, "apply_pai: mask shape " + to_string(g[l].shape()) + " vs pruning mask " +
                                            to_string(pai_mask[l].shape()));
      for (std::size_t k = 0; k < g[l].size(); ++k) g[l][k] &= pai_mask[l][k];
    }
  }
  if (count_ones(pai_mask) == 0 && stage_size(pai_mask) > 0)
    log::warn("apply_pai: pruning mask removes every weight of the stage; all group masks are empty");
  return out;
}

GroupMaskSet build_mask_set(const FissionPlan& plan, const std::vector<std::vector<Shape>>& stage_shapes,
                            std::uint64_t seed, const std::vector<StageMask>* pai_masks, double sparsity) {
  plan.validate();
  require(static_cast<int>(stage_shapes.size()) == plan.num_stages, "one shape list per stage is required");
  if (pai_masks) require(pai_masks->size() == stage_shapes.size(), "one pruning mask per stage is required");
  require(sparsity >= 0.0 && sparsity < 1.0, "sparsity must lie in [0, 1)");

  const Rng root(seed);
  GroupMaskSet set;
  set.sparsity = sparsity;
  for (int i = 1; i <= plan.num_stages; ++i) {
    const auto& shapes = stage_shapes[static_cast<std::size_t>(i - 1)];
    Rng rng = root.fork(static_cast<std::uint64_t>(i));
    auto groups = partition_stage(shapes, plan.groups(i), plan.group_ratios[static_cast<std::size_t>(i - 1)], rng);
    StageMask p = pai_masks ? (*pai_masks)[static_cast<std::size_t>(i - 1)] : ones_like(shapes);
    groups = apply_pai(groups, p);
    set.pai_masks.push_back(std::move(p));
    set.group_masks.push_back(std::move(groups));
  }
  return set;
}

int group_for(int stage, int exit, const FissionPlan& plan) {
  require(stage >= 1 && stage <= plan.num_stages, "stage index " + std::to_string(stage) + " out of range");
  require(exit >= 1 && exit <= plan.num_exits, "exit index " + std::to_string(exit) + " out of range");
  return exit <= plan.groups(stage) ? exit : 1;
}

std::vector<int> ExecutionDag::children(int node) const {
  std::vector<int> out;
  for (const auto& [from, to] : edges)
    if (from == node) out.push_back(to);
  return out;
}

ExecutionDag build_execution_dag(const FissionPlan& plan) {
  plan.validate();
  ExecutionDag dag;
  // Key: (parent node, group) -> node. Equal keys mean identical group prefixes.
  std::map<std::pair<int, int>, int> index;
  dag.exit_paths.assign(static_cast<std::size_t>(plan.num_exits), {});

  // Stage-major construction keeps nodes topologically ordered.
  std::vector<int> cursor(static_cast<std::size_t>(plan.num_exits), -1);
  for (int i = 1; i <= plan.num_stages; ++i) {
    for (int j = 1; j <= plan.num_exits; ++j) {
      const int parent = cursor[static_cast<std::size_t>(j - 1)];
      const int g = group_for(i, j, plan);
      auto [it, inserted] = index.try_emplace({parent, g}, static_cast<int>(dag.nodes.size()));
      if (inserted) {
        dag.nodes.push_back(DagNode{i, g, parent});
        if (parent >= 0) dag.edges.emplace_back(parent, it->second);
      }
      cursor[static_cast<std::size_t>(j - 1)] = it->second;
      dag.exit_paths[static_cast<std::size_t>(j - 1)].push_back(it->second);
    }
  }
  dag.exit_heads = cursor;
  return dag;
}

bool has_unique_stage_groups(const ExecutionDag& dag, const FissionPlan& plan) {
  std::map<std::pair<int, int>, int> seen;
  for (const auto& n : dag.nodes) ++seen[{n.stage, n.group}];
  for (int i = 1; i <= plan.num_stages; ++i)
    for (int g = 1; g <= plan.groups(i); ++g) {
      auto it = seen.find({i, g});
      if (it == seen.end() || it->second != 1) return false;
    }
  return seen.size() == static_cast<std::size_t>(std::accumulate(plan.groups_per_stage.begin(),
                                                                   plan.groups_per_stage.end(), 0));
}

void check_live_paths(const FissionPlan& plan, const GroupMaskSet& masks) {
  require(masks.num_stages() == plan.num_stages, "mask set stage count does not match the plan");
  for (int i = 1; i <= plan.num_stages; ++i)
    require(static_cast<int>(masks.group_masks[static_cast<std::size_t>(i - 1)].size()) == plan.groups(i),
            "mask set group count does not match the plan at stage " + std::to_string(i));
  for (int j = 1; j <= plan.num_exits; ++j)
    for (int i = 1; i <= plan.num_stages; ++i) {
      const auto& m = masks.group(i, group_for(i, j, plan));
      if (stage_size(m) > 0 && count_ones(m) == 0)
        fail(ErrorKind::dead_exit, "exit " + std::to_string(j) + " crosses an empty weight group at stage " +
                                       std::to_string(i) + " (group " + std::to_string(group_for(i, j, plan)) + ")");
    }
}

}  // namespace nfe
