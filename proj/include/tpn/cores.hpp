#pragma once

// Core architectures as compiled schedules of block applications.
//
// A CoreGraph is pure data: an ordered list of stages, each an ordered list of
// steps naming the block to apply, the level it updates and the levels it reads.
// Core<T> owns one block instance per block id and executes the graph.
//
// Communication stages (top-down / bottom-up sweeps) honor ExecMode:
//   Sequential - a step reads the neighbour map as already updated in this sweep.
//   Parallel   - every step of the stage reads the stage-input snapshot.
// Self-processing stages touch one level per chain, so the mode is irrelevant.

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "tpn/blocks.hpp"

namespace tpn {

enum class CoreKind { TPN, FPN, PANet, BiFPN, bFPN, hFPN };
enum class ExecMode { Sequential, Parallel };

std::string to_string(CoreKind kind);
/// Accepts "tpn", "fpn", "panet", "bifpn", "bfpn", "hfpn" (case-insensitive).
CoreKind parse_core_kind(const std::string& name);

struct CoreSpec {
  CoreKind kind = CoreKind::TPN;
  int layers = 1;       // L
  int bottlenecks = 1;  // B (TPN, bFPN, hFPN)
  int min_level = 3;
  int max_level = 7;
  BlockSizes sizes;
  ExecMode mode = ExecMode::Sequential;

  int levels() const { return max_level - min_level + 1; }
  /// Throws std::invalid_argument on L < 1, B < 1 (where used) or fewer than 2 levels.
  void validate() const;
};

enum class StepKind { TopDown, BottomUp, SelfProcess, BifpnTopDown, BifpnBottomUp };
enum class StageKind { TopDownSweep, BottomUpSweep, SelfProcessing, BifpnTopDown, BifpnBottomUp };
enum class BlockKind { TopDown, BottomUp, Bottleneck, BifpnNode };

std::string to_string(StepKind kind);
std::string to_string(StageKind kind);

struct Step {
  StepKind kind;
  int target;
  std::vector<int> sources;
  int block;
};

struct Stage {
  StageKind kind;
  int layer;
  std::vector<Step> steps;
};

struct BlockDecl {
  BlockKind kind;
  std::string name;
  int fusion_inputs = 0;  // BiFPN nodes only
};

struct CoreGraph {
  CoreSpec spec;
  std::vector<Stage> stages;
  std::vector<BlockDecl> blocks;

  std::size_t step_count() const;
  std::size_t count(StepKind kind) const;
};

CoreGraph build_tpn(int layers, int bottlenecks, int min_level = 3, int max_level = 7, BlockSizes sizes = {});
CoreGraph build_fpn(int min_level = 3, int max_level = 7, BlockSizes sizes = {}, int layers = 1);
CoreGraph build_panet(int layers, int min_level = 3, int max_level = 7, BlockSizes sizes = {});
CoreGraph build_bifpn(int layers, int min_level = 3, int max_level = 7, BlockSizes sizes = {});
CoreGraph build_bfpn(int bottlenecks, int min_level = 3, int max_level = 7, BlockSizes sizes = {});
CoreGraph build_hfpn(int bottlenecks, int min_level = 3, int max_level = 7, BlockSizes sizes = {});
/// Dispatches on spec.kind; the graph carries spec.mode.
CoreGraph build_core(const CoreSpec& spec);

/// Closed-form parameter count of a core (no allocation).
std::int64_t core_param_count(const CoreSpec& spec);

/// fused -> relu -> depthwise 3x3 -> pointwise 1x1 -> group_norm, with
/// fast-normalized nonnegative fusion weights (EfficientDet node, GN/ReLU variant).
template <typename T>
class BifpnNode {
 public:
  BifpnNode(ParamRegistry<T>& reg, const std::string& prefix, const BlockSizes& sizes, int inputs);

  Var<T> operator()(const std::vector<Var<T>>& inputs) const;

  static std::int64_t param_count(const BlockSizes& s, int inputs) {
    const std::int64_t f = s.feature_size;
    return inputs + f * 9 + f * f + f + 2 * f;
  }

  static constexpr double kFusionEps = 1e-4;

  BlockSizes sizes;
  Var<T> fusion;
  Conv<T> depthwise;
  Conv<T> pointwise;
  Var<T> gamma;
  Var<T> beta;
};

template <typename T>
class Core {
 public:
  using Block = std::variant<TopDownOp<T>, BottomUpOp<T>, BottleneckBlock<T>, BifpnNode<T>>;

  Core(ParamRegistry<T>& reg, const std::string& prefix, CoreGraph graph);

  /// Runs stages [first_stage, last_stage] (inclusive; -1 = last). `mode`
  /// overrides the graph's execution mode when given.
  FeaturePyramid<T> run(const FeaturePyramid<T>& input, std::optional<ExecMode> mode = std::nullopt,
                        int first_stage = 0, int last_stage = -1) const;

  /// Zeroes the final conv of every residual block, making the core the identity
  /// (BiFPN nodes are not residual and are left untouched).
  void zero_residuals();

  const CoreGraph& graph() const { return graph_; }
  const std::vector<Block>& blocks() const { return blocks_; }

 private:
  CoreGraph graph_;
  std::vector<Block> blocks_;
};

template <typename T>
FeaturePyramid<T> run_core(const Core<T>& core, const FeaturePyramid<T>& pyramid) {
  return core.run(pyramid);
}

extern template class Core<float>;
extern template class Core<double>;

}  // namespace tpn
