// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nfe/rng.hpp"
#include "nfe/tensor.hpp"

namespace nfe {

/// Multi-exit topology: how many weight groups each stage is split into and
/// the categorical ratios used to split it. Stages and exits are 1-based in
/// the public API.
struct FissionPlan {
  int num_exits = 1;
  int num_stages = 1;
  std::vector<int> groups_per_stage;
  std::vector<std::vector<double>> group_ratios;

  /// Throws ErrorKind::invalid_argument when an invariant is broken.
  void validate() const;
  bool monotone() const noexcept;
  int groups(int stage) const { return groups_per_stage.at(static_cast<std::size_t>(stage - 1)); }

  friend bool operator==(const FissionPlan&, const FissionPlan&) = default;
};

/// Balanced countdown plan: g_i = max(1, N - (K - i)).
FissionPlan default_plan(int num_exits, int num_stages);

/// Explicit per-stage group counts. Empty `ratios` means balanced grouping.
FissionPlan custom_plan(int num_exits, std::vector<int> groups_per_stage,
                        std::vector<std::vector<double>> ratios = {});

/// Variant-name sugar such as "Res**34" or "WRN1*3". Position i (1-based)
/// after the prefix describes stage i: a digit means the stage carries a
/// second group, '*' means it stays shared. Stage 1 is always shared, so a
/// digit there is accepted without effect. Produces a two-exit plan.
FissionPlan plan_from_variant(std::string_view name);

/// Stage weights are a list of tensors (one per groupable layer); a stage
/// mask mirrors that list.
using StageMask = std::vector<Mask>;

StageMask ones_like(std::span<const Shape> shapes);
StageMask zeros_like(std::span<const Shape> shapes);
std::size_t count_ones(const StageMask& m) noexcept;
std::size_t stage_size(const StageMask& m) noexcept;
std::vector<Shape> shapes_of(const StageMask& m);

struct GroupMaskSet {
  std::vector<StageMask> pai_masks;                 // [stage] -> p_i
  std::vector<std::vector<StageMask>> group_masks;  // [stage][group] -> M_i^j
  double sparsity = 0.0;

  int num_stages() const noexcept { return static_cast<int>(group_masks.size()); }
  const StageMask& group(int stage, int group) const {
    return group_masks.at(static_cast<std::size_t>(stage - 1)).at(static_cast<std::size_t>(group - 1));
  }

  /// Checks disjointness, the partition-of-p_i property and binary entries.
  /// Throws ErrorKind::invalid_argument describing the first violation.
  void verify() const;

  friend bool operator==(const GroupMaskSet&, const GroupMaskSet&) = default;
};

/// Builds masks from an explicit group assignment (0-based group index per
/// flat weight position, concatenated over the stage's layers).
std::vector<StageMask> masks_from_assignment(std::span<const Shape> shapes, int num_groups,
                                             std::span<const int> assignment);

/// Splits one stage into `num_groups` disjoint masks that sum to all-ones.
/// Each position is assigned by an independent categorical draw.
std::vector<StageMask> partition_stage(std::span<const Shape> shapes, int num_groups,
                                       std::span<const double> ratios, Rng& rng);

/// Intersects every group mask of one stage with the pruning mask.
std::vector<StageMask> apply_pai(const std::vector<StageMask>& group_masks, const StageMask& pai_mask);

/// Whole-network masks: partition every stage per `plan` (one forked stream
/// per stage) and intersect with `pai_masks` when given.
GroupMaskSet build_mask_set(const FissionPlan& plan, const std::vector<std::vector<Shape>>& stage_shapes,
                            std::uint64_t seed, const std::vector<StageMask>* pai_masks = nullptr,
                            double sparsity = 0.0);

/// Group used by `exit` at `stage` under the fall-back rule.
int group_for(int stage, int exit, const FissionPlan& plan);

struct DagNode {
  int stage = 0;    // 1-based
  int group = 0;    // 1-based
  int lineage = -1; // index of the parent node, -1 when fed by the stem
};

/// Prefix-shared computation graph: one node per distinct (stage, group,
/// input activation). Nodes are topologically ordered by stage.
struct ExecutionDag {
  std::vector<DagNode> nodes;
  std::vector<std::pair<int, int>> edges;  // parent -> child
  std::vector<int> exit_heads;             // [exit-1] -> terminal node
  std::vector<std::vector<int>> exit_paths;  // [exit-1] -> node per stage

  std::size_t size() const noexcept { return nodes.size(); }
  std::vector<int> children(int node) const;
};

ExecutionDag build_execution_dag(const FissionPlan& plan);

/// True when every (stage, group) pair of the plan appears in exactly one node.
bool has_unique_stage_groups(const ExecutionDag& dag, const FissionPlan& plan);

/// Fails with ErrorKind::dead_exit if any exit path crosses an all-zero group mask.
void check_live_paths(const FissionPlan& plan, const GroupMaskSet& masks);

}  // namespace nfe
