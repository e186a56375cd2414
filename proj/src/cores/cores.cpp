#include "tpn/cores.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

namespace tpn {

std::string to_string(CoreKind kind) {
  switch (kind) {
    case CoreKind::TPN: return "tpn";
    case CoreKind::FPN: return "fpn";
    case CoreKind::PANet: return "panet";
    case CoreKind::BiFPN: return "bifpn";
    case CoreKind::bFPN: return "bfpn";
    case CoreKind::hFPN: return "hfpn";
  }
  return "?";
}

CoreKind parse_core_kind(const std::string& name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (CoreKind k : {CoreKind::TPN, CoreKind::FPN, CoreKind::PANet, CoreKind::BiFPN, CoreKind::bFPN, CoreKind::hFPN}) {
    if (to_string(k) == lower) return k;
  }
  throw std::invalid_argument("unknown core kind '" + name + "' (expected tpn, fpn, panet, bifpn, bfpn or hfpn)");
}

std::string to_string(StepKind kind) {
  switch (kind) {
    case StepKind::TopDown: return "TD";
    case StepKind::BottomUp: return "BU";
    case StepKind::SelfProcess: return "SP";
    case StepKind::BifpnTopDown: return "BIFPN_TD";
    case StepKind::BifpnBottomUp: return "BIFPN_BU";
  }
  return "?";
}

std::string to_string(StageKind kind) {
  switch (kind) {
    case StageKind::TopDownSweep: return "top-down";
    case StageKind::BottomUpSweep: return "bottom-up";
    case StageKind::SelfProcessing: return "self-processing";
    case StageKind::BifpnTopDown: return "bifpn-top-down";
    case StageKind::BifpnBottomUp: return "bifpn-bottom-up";
  }
  return "?";
}

void CoreSpec::validate() const {
  if (layers < 1) throw std::invalid_argument("core: L must be >= 1");
  const bool uses_b = kind == CoreKind::TPN || kind == CoreKind::bFPN || kind == CoreKind::hFPN;
  if (uses_b && bottlenecks < 1) throw std::invalid_argument("core: B must be >= 1");
  if (max_level - min_level < 1) throw std::invalid_argument("core: level range must span at least 2 levels");
  if (sizes.feature_size < 1 || sizes.hidden_size < 1 || sizes.norm_groups < 1) {
    throw std::invalid_argument("core: sizes must be positive");
  }
  if (sizes.feature_size % sizes.norm_groups != 0 || sizes.hidden_size % sizes.norm_groups != 0) {
    throw std::invalid_argument("core: feature and hidden sizes must be divisible by the norm groups");
  }
}

std::size_t CoreGraph::step_count() const {
  std::size_t n = 0;
  for (const auto& st : stages) n += st.steps.size();
  return n;
}

std::size_t CoreGraph::count(StepKind kind) const {
  std::size_t n = 0;
  for (const auto& st : stages) {
    n += static_cast<std::size_t>(
        std::count_if(st.steps.begin(), st.steps.end(), [kind](const Step& s) { return s.kind == kind; }));
  }
  return n;
}

namespace {

class GraphBuilder {
 public:
  explicit GraphBuilder(CoreSpec spec) {
    spec.validate();
    graph_.spec = spec;
  }

  void top_down_sweep(int layer, const std::string& prefix) {
    Stage stage{StageKind::TopDownSweep, layer, {}};
    for (int l = max() - 1; l >= min(); --l) {
      stage.steps.push_back({StepKind::TopDown, l, {l + 1}, add(BlockKind::TopDown, prefix + "td" + std::to_string(l))});
    }
    graph_.stages.push_back(std::move(stage));
  }

  void bottom_up_sweep(int layer, const std::string& prefix) {
    Stage stage{StageKind::BottomUpSweep, layer, {}};
    for (int l = min() + 1; l <= max(); ++l) {
      stage.steps.push_back(
          {StepKind::BottomUp, l, {l - 1}, add(BlockKind::BottomUp, prefix + "bu" + std::to_string(l))});
    }
    graph_.stages.push_back(std::move(stage));
  }

  void self_processing(int layer, const std::string& prefix, int bottlenecks) {
    Stage stage{StageKind::SelfProcessing, layer, {}};
    for (int l = min(); l <= max(); ++l) {
      for (int b = 0; b < bottlenecks; ++b) {
        const std::string name = prefix + "p" + std::to_string(l) + ".b" + std::to_string(b);
        stage.steps.push_back({StepKind::SelfProcess, l, {l}, add(BlockKind::Bottleneck, name)});
      }
    }
    graph_.stages.push_back(std::move(stage));
  }

  void bifpn_layer(int layer, const std::string& prefix) {
    Stage down{StageKind::BifpnTopDown, layer, {}};
    for (int l = max() - 1; l >= min(); --l) {
      down.steps.push_back(
          {StepKind::BifpnTopDown, l, {l, l + 1}, add(BlockKind::BifpnNode, prefix + "td" + std::to_string(l), 2)});
    }
    graph_.stages.push_back(std::move(down));
    Stage up{StageKind::BifpnBottomUp, layer, {}};
    for (int l = min() + 1; l <= max(); ++l) {
      std::vector<int> sources = l < max() ? std::vector<int>{l, l, l - 1} : std::vector<int>{l, l - 1};
      const int inputs = static_cast<int>(sources.size());
      up.steps.push_back(
          {StepKind::BifpnBottomUp, l, sources, add(BlockKind::BifpnNode, prefix + "out" + std::to_string(l), inputs)});
    }
    graph_.stages.push_back(std::move(up));
  }

  CoreGraph finish() { return std::move(graph_); }

 private:
  int min() const { return graph_.spec.min_level; }
  int max() const { return graph_.spec.max_level; }
  int add(BlockKind kind, std::string name, int fusion = 0) {
    graph_.blocks.push_back({kind, std::move(name), fusion});
    return static_cast<int>(graph_.blocks.size()) - 1;
  }

  CoreGraph graph_;
};

CoreSpec make_spec(CoreKind kind, int layers, int bottlenecks, int min_level, int max_level, BlockSizes sizes) {
  CoreSpec spec;
  spec.kind = kind;
  spec.layers = layers;
  spec.bottlenecks = bottlenecks;
  spec.min_level = min_level;
  spec.max_level = max_level;
  spec.sizes = sizes;
  return spec;
}

std::string layer_prefix(int layer) { return "layer" + std::to_string(layer) + "."; }

}  // namespace

CoreGraph build_tpn(int layers, int bottlenecks, int min_level, int max_level, BlockSizes sizes) {
  GraphBuilder b(make_spec(CoreKind::TPN, layers, bottlenecks, min_level, max_level, sizes));
  for (int layer = 0; layer < layers; ++layer) {
    const std::string p = layer_prefix(layer);
    b.top_down_sweep(layer, p);
    b.self_processing(layer, p + "sp1.", bottlenecks);
    b.bottom_up_sweep(layer, p);
    b.self_processing(layer, p + "sp2.", bottlenecks);
  }
  return b.finish();
}

CoreGraph build_fpn(int min_level, int max_level, BlockSizes sizes, int layers) {
  GraphBuilder b(make_spec(CoreKind::FPN, layers, 0, min_level, max_level, sizes));
  for (int layer = 0; layer < layers; ++layer) b.top_down_sweep(layer, layer_prefix(layer));
  return b.finish();
}

CoreGraph build_panet(int layers, int min_level, int max_level, BlockSizes sizes) {
  GraphBuilder b(make_spec(CoreKind::PANet, layers, 0, min_level, max_level, sizes));
  for (int layer = 0; layer < layers; ++layer) {
    b.top_down_sweep(layer, layer_prefix(layer));
    b.bottom_up_sweep(layer, layer_prefix(layer));
  }
  return b.finish();
}

CoreGraph build_bifpn(int layers, int min_level, int max_level, BlockSizes sizes) {
  GraphBuilder b(make_spec(CoreKind::BiFPN, layers, 0, min_level, max_level, sizes));
  for (int layer = 0; layer < layers; ++layer) b.bifpn_layer(layer, layer_prefix(layer));
  return b.finish();
}

CoreGraph build_bfpn(int bottlenecks, int min_level, int max_level, BlockSizes sizes) {
  GraphBuilder b(make_spec(CoreKind::bFPN, 1, bottlenecks, min_level, max_level, sizes));
  b.self_processing(0, "self.", bottlenecks);
  b.top_down_sweep(0, "fpn.");
  return b.finish();
}

CoreGraph build_hfpn(int bottlenecks, int min_level, int max_level, BlockSizes sizes) {
  GraphBuilder b(make_spec(CoreKind::hFPN, 1, bottlenecks, min_level, max_level, sizes));
  b.top_down_sweep(0, "fpn.");
  b.self_processing(0, "self.", bottlenecks);
  return b.finish();
}

CoreGraph build_core(const CoreSpec& spec) {
  CoreGraph g;
  switch (spec.kind) {
    case CoreKind::TPN: g = build_tpn(spec.layers, spec.bottlenecks, spec.min_level, spec.max_level, spec.sizes); break;
    case CoreKind::FPN: g = build_fpn(spec.min_level, spec.max_level, spec.sizes, spec.layers); break;
    case CoreKind::PANet: g = build_panet(spec.layers, spec.min_level, spec.max_level, spec.sizes); break;
    case CoreKind::BiFPN: g = build_bifpn(spec.layers, spec.min_level, spec.max_level, spec.sizes); break;
    case CoreKind::bFPN: g = build_bfpn(spec.bottlenecks, spec.min_level, spec.max_level, spec.sizes); break;
    case CoreKind::hFPN: g = build_hfpn(spec.bottlenecks, spec.min_level, spec.max_level, spec.sizes); break;
  }
  g.spec.mode = spec.mode;
  return g;
}

std::int64_t core_param_count(const CoreSpec& spec) {
  spec.validate();
  const std::int64_t n = spec.levels();
  const std::int64_t td = TopDownOp<float>::param_count(spec.sizes);
  const std::int64_t bu = BottomUpOp<float>::param_count(spec.sizes);
  const std::int64_t bn = BottleneckBlock<float>::param_count(spec.sizes);
  const std::int64_t L = spec.layers;
  const std::int64_t B = spec.bottlenecks;
  switch (spec.kind) {
    case CoreKind::TPN: return L * ((n - 1) * td + (n - 1) * bu + 2 * n * B * bn);
    case CoreKind::FPN: return L * (n - 1) * td;
    case CoreKind::PANet: return L * (n - 1) * (td + bu);
    case CoreKind::BiFPN: {
      const std::int64_t two = BifpnNode<float>::param_count(spec.sizes, 2);
      const std::int64_t three = BifpnNode<float>::param_count(spec.sizes, 3);
      return L * ((n - 1) * two + (n - 2) * three + two);
    }
    case CoreKind::bFPN:
    case CoreKind::hFPN: return n * B * bn + (n - 1) * td;
  }
  return 0;
}

template <typename T>
BifpnNode<T>::BifpnNode(ParamRegistry<T>& reg, const std::string& prefix, const BlockSizes& s, int inputs)
    : sizes(s) {
  fusion = reg.constant(join_name(prefix, "fusion"), {1, inputs, 1, 1}, T(1));
  depthwise = Conv<T>(reg, join_name(prefix, "depthwise"), s.feature_size, s.feature_size, 3, 1, s.feature_size, false);
  pointwise = Conv<T>(reg, join_name(prefix, "pointwise"), s.feature_size, s.feature_size, 1);
  gamma = reg.constant(join_name(prefix, "gn.gamma"), {1, s.feature_size, 1, 1}, T(1));
  beta = reg.constant(join_name(prefix, "gn.beta"), {1, s.feature_size, 1, 1}, T(0));
}

template <typename T>
Var<T> BifpnNode<T>::operator()(const std::vector<Var<T>>& inputs) const {
  Var<T> fused = ops::weighted_fusion(inputs, fusion, kFusionEps);
  return ops::group_norm(pointwise(depthwise(ops::relu(fused))), gamma, beta, sizes.norm_groups, kGroupNormEps);
}

template <typename T>
Core<T>::Core(ParamRegistry<T>& reg, const std::string& prefix, CoreGraph graph) : graph_(std::move(graph)) {
  const BlockSizes& s = graph_.spec.sizes;
  blocks_.reserve(graph_.blocks.size());
  for (const auto& decl : graph_.blocks) {
    const std::string name = join_name(prefix, decl.name);
    switch (decl.kind) {
      case BlockKind::TopDown: blocks_.emplace_back(std::in_place_type<TopDownOp<T>>, reg, name, s); break;
      case BlockKind::BottomUp: blocks_.emplace_back(std::in_place_type<BottomUpOp<T>>, reg, name, s); break;
      case BlockKind::Bottleneck: blocks_.emplace_back(std::in_place_type<BottleneckBlock<T>>, reg, name, s); break;
      case BlockKind::BifpnNode:
        blocks_.emplace_back(std::in_place_type<BifpnNode<T>>, reg, name, s, decl.fusion_inputs);
        break;
    }
  }
}

template <typename T>
void Core<T>::zero_residuals() {
  for (auto& block : blocks_) {
    std::visit(
        [](auto& b) {
          if constexpr (!std::is_same_v<std::decay_t<decltype(b)>, BifpnNode<T>>) b.zero_residual();
        },
        block);
  }
}

template <typename T>
FeaturePyramid<T> Core<T>::run(const FeaturePyramid<T>& input, std::optional<ExecMode> mode, int first_stage,
                               int last_stage) const {
  const CoreSpec& spec = graph_.spec;
  if (input.min_level != spec.min_level || input.max_level() != spec.max_level) {
    throw ShapeError("core: pyramid levels P" + std::to_string(input.min_level) + "..P" +
                     std::to_string(input.max_level()) + " do not match the graph's P" +
                     std::to_string(spec.min_level) + "..P" + std::to_string(spec.max_level));
  }
  for (const auto& m : input.maps) {
    if (m.shape().c != spec.sizes.feature_size) {
      throw ShapeError("core: pyramid map has " + std::to_string(m.shape().c) + " channels, expected " +
                       std::to_string(spec.sizes.feature_size));
    }
  }
  const bool sequential = mode.value_or(spec.mode) == ExecMode::Sequential;
  const int last = last_stage < 0 ? static_cast<int>(graph_.stages.size()) - 1 : last_stage;

  FeaturePyramid<T> out = input;
  std::vector<Var<T>> layer_input;
  std::vector<Var<T>> td;
  auto idx = [&](int level) { return static_cast<std::size_t>(level - spec.min_level); };
  auto resized = [](const Var<T>& x, const Var<T>& like) {
    return ops::bilinear_resize(x, like.shape().h, like.shape().w);
  };

  for (int si = first_stage; si <= last; ++si) {
    const Stage& stage = graph_.stages.at(static_cast<std::size_t>(si));
    const std::vector<Var<T>> snapshot = out.maps;
    switch (stage.kind) {
      case StageKind::TopDownSweep:
        for (const Step& step : stage.steps) {
          const Var<T>& src = sequential ? out.at(step.sources[0]) : snapshot[idx(step.sources[0])];
          out.at(step.target) = std::get<TopDownOp<T>>(blocks_[static_cast<std::size_t>(step.block)])(out.at(step.target), src);
        }
        break;
      case StageKind::BottomUpSweep:
        for (const Step& step : stage.steps) {
          const Var<T>& src = sequential ? out.at(step.sources[0]) : snapshot[idx(step.sources[0])];
          out.at(step.target) = std::get<BottomUpOp<T>>(blocks_[static_cast<std::size_t>(step.block)])(out.at(step.target), src);
        }
        break;
      case StageKind::SelfProcessing:
        for (const Step& step : stage.steps) {
          out.at(step.target) = std::get<BottleneckBlock<T>>(blocks_[static_cast<std::size_t>(step.block)])(out.at(step.target));
        }
        break;
      case StageKind::BifpnTopDown:
        layer_input = out.maps;
        td = out.maps;
        for (const Step& step : stage.steps) {
          const auto& node = std::get<BifpnNode<T>>(blocks_[static_cast<std::size_t>(step.block)]);
          const Var<T>& own = layer_input[idx(step.target)];
          td[idx(step.target)] = node({own, resized(td[idx(step.target + 1)], own)});
        }
        out.at(spec.min_level) = td[idx(spec.min_level)];
        break;
      case StageKind::BifpnBottomUp:
        if (layer_input.empty()) {
          layer_input = out.maps;
          td = out.maps;
        }
        for (const Step& step : stage.steps) {
          const auto& node = std::get<BifpnNode<T>>(blocks_[static_cast<std::size_t>(step.block)]);
          const Var<T>& own = layer_input[idx(step.target)];
          std::vector<Var<T>> inputs{own};
          if (step.target < spec.max_level) inputs.push_back(td[idx(step.target)]);
          inputs.push_back(resized(out.at(step.target - 1), own));
          out.at(step.target) = node(inputs);
        }
        layer_input.clear();
        td.clear();
        break;
    }
  }
  return out;
}

template class BifpnNode<float>;
template class BifpnNode<double>;
template class Core<float>;
template class Core<double>;

}  // namespace tpn
