#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "tpn/model.hpp"

using namespace tpn;
using nlohmann::json;

namespace {

const char* kToy = R"({"backbone": "tiny",
  "core": {"kind": "tpn", "L": 2, "B": 2, "mode": "parallel"},
  "head": {"C": 1, "num_classes": 3, "final_kernel": 1},
  "feature_size": 32, "hidden_size": 8, "norm_groups": 4})";

std::string temp_file(const std::string& name, const std::string& content) {
  const auto path = std::filesystem::temp_directory_path() / name;
  std::ofstream(path) << content;
  return path.string();
}

}  // namespace

TEST_CASE("model spec: parsing, defaults and round trip") {
  const ModelSpec s = ModelSpec::from_json(json::parse(kToy));
  CHECK(s.backbone == BackboneKind::Tiny);
  CHECK(s.core.kind == CoreKind::TPN);
  CHECK(s.core.layers == 2);
  CHECK(s.core.bottlenecks == 2);
  CHECK(s.core.mode == ExecMode::Parallel);
  CHECK(s.core.sizes.feature_size == 32);
  CHECK(s.head.feature_size == 32);
  CHECK(s.head.norm_groups == 4);
  CHECK(s.head.num_classes == 3);

  const ModelSpec back = ModelSpec::from_json(s.to_json());
  CHECK(back.to_json() == s.to_json());

  const ModelSpec d = ModelSpec::from_json(json::parse(R"({"core": {"kind": "FPN"}})"));
  CHECK(d.backbone == BackboneKind::Tiny);
  CHECK(d.core.kind == CoreKind::FPN);
  CHECK(d.core.sizes.feature_size == 256);
  CHECK(d.core.sizes.hidden_size == 64);
  CHECK(d.head.num_classes == 80);
  CHECK(d.head.hidden_layers == 1);
  CHECK(d.core.mode == ExecMode::Sequential);
}

TEST_CASE("model spec: every malformed description is a ConfigError") {
  const char* bad[] = {
      R"([1, 2])",
      R"({"backbone": "tiny"})",
      R"({"core": {"kind": "lattice"}})",
      R"({"core": {"kind": "tpn", "mode": "async"}})",
      R"({"core": {"kind": "tpn", "L": 0}})",
      R"({"core": {"kind": "tpn", "B": 0}})",
      R"({"core": {"kind": "tpn", "L": "two"}})",
      R"({"core": {"kind": "tpn"}, "colour": 1})",
      R"({"core": {"kind": "tpn", "levels": 4}})",
      R"({"core": {"kind": "tpn"}, "head": {"C": -1}})",
      R"({"core": {"kind": "tpn"}, "head": {"final_kernel": 2}})",
      R"({"core": {"kind": "tpn"}, "head": {"depth": 2}})",
      R"({"core": {"kind": "tpn"}, "feature_size": 60, "norm_groups": 8})",
      R"({"backbone": "vgg", "core": {"kind": "tpn"}})",
  };
  for (const char* text : bad) {
    CAPTURE(text);
    CHECK_THROWS_AS(ModelSpec::from_json(json::parse(text)), ConfigError);
  }
  CHECK_THROWS_AS(load_model_spec("/nonexistent/model.json"), ConfigError);
  CHECK_THROWS_AS(load_model_spec(temp_file("tpn_bad_model.json", "{ not json")), ConfigError);
  CHECK(load_model_spec(temp_file("tpn_good_model.json", kToy)).core.layers == 2);
}

TEST_CASE("model: forward shapes on the tiny backbone") {
  const Model<float> m(ModelSpec::from_json(json::parse(kToy)), 3);
  CHECK(m.runnable());
  NoGradGuard guard;
  const auto out = m(Var<float>(Tensor<float>({2, 3, 64, 64}, 0.25f)));
  REQUIRE(out.levels.size() == 5);
  const std::int64_t side[] = {8, 4, 2, 1, 1};
  for (std::size_t l = 0; l < 5; ++l) {
    CHECK(out.levels[l].cls.shape() == Shape{2, 27, side[l], side[l]});
    CHECK(out.levels[l].box.shape() == Shape{2, 36, side[l], side[l]});
  }
}

TEST_CASE("model: initialization is a function of the seed") {
  const ModelSpec s = ModelSpec::from_json(json::parse(kToy));
  const Model<float> a(s, 5);
  const Model<float> b(s, 5);
  const Model<float> c(s, 6);
  REQUIRE(a.registry.params().size() == c.registry.params().size());
  bool all_same = true;
  bool any_diff = false;
  for (std::size_t i = 0; i < a.registry.params().size(); ++i) {
    all_same = all_same && bit_equal(a.registry.params()[i].var.value(), b.registry.params()[i].var.value());
    any_diff = any_diff || !bit_equal(a.registry.params()[i].var.value(), c.registry.params()[i].var.value());
  }
  CHECK(all_same);
  CHECK(any_diff);
}

TEST_CASE("model: ResNet-shape backbones are counting-only") {
  const ModelSpec s = ModelSpec::from_json(json::parse(R"({"backbone": "resnet50-shape", "core": {"kind": "fpn"},
      "feature_size": 16, "hidden_size": 8, "norm_groups": 4, "head": {"num_classes": 2}})"));
  const Model<float> m(s, 0);
  CHECK_FALSE(m.runnable());
  CHECK_THROWS_AS(m(Var<float>(Tensor<float>({1, 3, 64, 64}))), ConfigError);
  std::int64_t frozen = 0;
  for (const auto& p : m.registry.params()) {
    if (p.frozen) {
      CHECK(p.name.rfind("backbone.", 0) == 0);
      frozen += p.var.value().numel();
    }
  }
  CHECK(frozen == count_backbone_params(make_backbone_spec(BackboneKind::ResNet50)).frozen);
}
