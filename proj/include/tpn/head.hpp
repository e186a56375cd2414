#pragma once

// One-stage detection head: a classification and a box subnet, each with C
// hidden conv -> group_norm -> relu layers and a final plain conv, shared
// across all pyramid levels.
//
// Output layout at every level (anchor a, class k, coordinate j):
//   cls channel a * num_classes + k,   box channel a * 4 + j.

#include <cstdint>
#include <vector>

#include "tpn/blocks.hpp"

namespace tpn {

struct HeadSpec {
  int hidden_layers = 1;  // C
  int num_classes = 80;
  int anchors = 9;
  int final_kernel = 1;
  int feature_size = 256;
  int norm_groups = 8;
  /// Classification bias starts at -ln((1 - prior) / prior).
  double prior = 0.01;

  void validate() const;
};

std::int64_t head_param_count(const HeadSpec& spec);

template <typename T>
struct LevelOutput {
  Var<T> cls;  // (n, A*K, h, w)
  Var<T> box;  // (n, 4A, h, w)
};

template <typename T>
struct HeadOutput {
  int min_level = 3;
  std::vector<LevelOutput<T>> levels;
};

template <typename T>
class Head {
 public:
  struct Subnet {
    std::vector<Conv<T>> hidden;
    std::vector<Var<T>> gamma;
    std::vector<Var<T>> beta;
    Conv<T> final;
  };

  Head(ParamRegistry<T>& reg, const std::string& prefix, const HeadSpec& spec);

  LevelOutput<T> apply(const Var<T>& p) const;
  HeadOutput<T> operator()(const FeaturePyramid<T>& pyramid) const;

  HeadSpec spec;
  Subnet cls;
  Subnet box;

 private:
  Var<T> run(const Subnet& net, const Var<T>& x) const;
};

extern template class Head<float>;
extern template class Head<double>;

}  // namespace tpn
