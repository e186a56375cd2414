#pragma once

// Backbone + stem + core + head, described by a JSON model file:
//
//   {"backbone": "tiny",
//    "core": {"kind": "tpn", "L": 2, "B": 2, "mode": "sequential"},
//    "head": {"C": 1, "num_classes": 3, "final_kernel": 1},
//    "feature_size": 64, "hidden_size": 16, "norm_groups": 8}
//
// Every key except "core.kind" has a default (backbone "tiny", L = B = 1,
// C = 1, 80 classes, feature 256, hidden 64, 8 groups).

#include <memory>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "tpn/backbone.hpp"
#include "tpn/cores.hpp"
#include "tpn/head.hpp"

namespace tpn {

/// Malformed or inconsistent model/config description.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelSpec {
  BackboneKind backbone = BackboneKind::Tiny;
  CoreSpec core;
  HeadSpec head;

  /// Throws ConfigError.
  void validate() const;
  BlockSizes sizes() const { return core.sizes; }

  static ModelSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Reads and validates a model file; ConfigError on I/O or content problems.
ModelSpec load_model_spec(const std::string& path);

template <typename T>
class Model {
 public:
  Model(const ModelSpec& spec, std::uint64_t seed);

  /// Tiny backbone only; ResNet-shape backbones exist for counting.
  bool runnable() const { return tiny_ != nullptr; }

  FeaturePyramid<T> features(const Var<T>& image) const;
  HeadOutput<T> operator()(const Var<T>& image) const;

  ModelSpec spec;
  ParamRegistry<T> registry;

  const TinyBackbone<T>& tiny_backbone() const { return *tiny_; }
  const PyramidStem<T>& stem() const { return *stem_; }
  Core<T>& core() { return *core_; }
  const Core<T>& core() const { return *core_; }
  const Head<T>& head() const { return *head_; }

 private:
  std::unique_ptr<TinyBackbone<T>> tiny_;
  std::unique_ptr<ResNetShape<T>> resnet_;
  std::unique_ptr<PyramidStem<T>> stem_;
  std::unique_ptr<Core<T>> core_;
  std::unique_ptr<Head<T>> head_;
};

extern template class Model<float>;
extern template class Model<double>;

}  // namespace tpn
