#include "tpn/model.hpp"

#include <fstream>
#include <set>

namespace tpn {

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename V>
V get_or(const json& obj, const char* key, V fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(where + ": bad value for '" + key + "'");
  }
}

std::string mode_name(ExecMode m) { return m == ExecMode::Sequential ? "sequential" : "parallel"; }

}  // namespace

void ModelSpec::validate() const {
  try {
    core.validate();
    head.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (core.min_level != 3 || core.max_level != 7) throw ConfigError("model: the stem produces levels 3..7 only");
  if (head.feature_size != core.sizes.feature_size) throw ConfigError("model: head and core feature sizes differ");
}

ModelSpec ModelSpec::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model: expected a JSON object");
  reject_unknown(j, {"backbone", "core", "head", "feature_size", "hidden_size", "norm_groups"}, "model");
  ModelSpec s;
  try {
    s.backbone = parse_backbone_kind(get_or<std::string>(j, "backbone", "tiny", "model"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  BlockSizes sizes;
  sizes.feature_size = get_or<int>(j, "feature_size", 256, "model");
  sizes.hidden_size = get_or<int>(j, "hidden_size", 64, "model");
  sizes.norm_groups = get_or<int>(j, "norm_groups", 8, "model");

  if (!j.contains("core") || !j.at("core").is_object()) throw ConfigError("model: missing 'core' object");
  const json& c = j.at("core");
  reject_unknown(c, {"kind", "L", "B", "mode"}, "core");
  if (!c.contains("kind")) throw ConfigError("core: missing 'kind'");
  try {
    s.core.kind = parse_core_kind(get_or<std::string>(c, "kind", "", "core"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  s.core.layers = get_or<int>(c, "L", 1, "core");
  s.core.bottlenecks = get_or<int>(c, "B", 1, "core");
  const std::string mode = get_or<std::string>(c, "mode", "sequential", "core");
  if (mode == "sequential") {
    s.core.mode = ExecMode::Sequential;
  } else if (mode == "parallel") {
    s.core.mode = ExecMode::Parallel;
  } else {
    throw ConfigError("core: mode must be 'sequential' or 'parallel'");
  }
  s.core.sizes = sizes;

  const json h = j.value("head", json::object());
  if (!h.is_object()) throw ConfigError("model: 'head' must be an object");
  reject_unknown(h, {"C", "num_classes", "final_kernel", "anchors"}, "head");
  s.head.hidden_layers = get_or<int>(h, "C", 1, "head");
  s.head.num_classes = get_or<int>(h, "num_classes", 80, "head");
  s.head.final_kernel = get_or<int>(h, "final_kernel", 1, "head");
  s.head.anchors = get_or<int>(h, "anchors", 9, "head");
  s.head.feature_size = sizes.feature_size;
  s.head.norm_groups = sizes.norm_groups;
  s.validate();
  return s;
}

json ModelSpec::to_json() const {
  return json{{"backbone", to_string(backbone)},
              {"core",
               {{"kind", to_string(core.kind)},
                {"L", core.layers},
                {"B", core.bottlenecks},
                {"mode", mode_name(core.mode)}}},
              {"head",
               {{"C", head.hidden_layers},
                {"num_classes", head.num_classes},
                {"final_kernel", head.final_kernel},
                {"anchors", head.anchors}}},
              {"feature_size", core.sizes.feature_size},
              {"hidden_size", core.sizes.hidden_size},
              {"norm_groups", core.sizes.norm_groups}};
}

ModelSpec load_model_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("model file '" + path + "' is not valid JSON: " + e.what());
  }
  return ModelSpec::from_json(j);
}

template <typename T>
Model<T>::Model(const ModelSpec& s, std::uint64_t seed) : spec(s), registry(seed) {
  spec.validate();
  const BackboneSpec bb = make_backbone_spec(spec.backbone);
  if (spec.backbone == BackboneKind::Tiny) {
    tiny_ = std::make_unique<TinyBackbone<T>>(registry, "backbone", spec.core.sizes.norm_groups);
  } else {
    resnet_ = std::make_unique<ResNetShape<T>>(registry, "backbone", bb);
  }
  stem_ = std::make_unique<PyramidStem<T>>(registry, "stem", bb.out_channels(), spec.core.sizes.feature_size);
  core_ = std::make_unique<Core<T>>(registry, "core", build_core(spec.core));
  head_ = std::make_unique<Head<T>>(registry, "head", spec.head);
}

template <typename T>
FeaturePyramid<T> Model<T>::features(const Var<T>& image) const {
  if (!runnable()) throw ConfigError("model: " + to_string(spec.backbone) + " is a counting-only backbone");
  const auto c = (*tiny_)(image);
  return core_->run((*stem_)(c[0], c[1], c[2]));
}

template <typename T>
HeadOutput<T> Model<T>::operator()(const Var<T>& image) const {
  return (*head_)(features(image));
}

template class Model<float>;
template class Model<double>;

}  // namespace tpn
