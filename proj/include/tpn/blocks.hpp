#pragma once

// Building blocks shared by every core: the pre-activation conv node, the
// bottleneck self-processing layer, the top-down and bottom-up residual
// operations, and the stem that turns C3..C5 into P3..P7.

#include <array>
#include <cstdint>
#include <string>

#include "tpn/params.hpp"
#include "tpn/pyramid.hpp"

namespace tpn {

inline constexpr double kGroupNormEps = 1e-5;

/// Plain convolution with bias; padding = kernel / 2.
template <typename T>
class Conv {
 public:
  Conv() = default;
  Conv(ParamRegistry<T>& reg, const std::string& prefix, int in_c, int out_c, int kernel, int stride = 1,
       int groups = 1, bool with_bias = true);

  Var<T> operator()(const Var<T>& x) const;

  /// Weights and bias to zero.
  void zero();

  static std::int64_t param_count(int in_c, int out_c, int kernel, int groups = 1, bool with_bias = true) {
    return static_cast<std::int64_t>(out_c) * (in_c / groups) * kernel * kernel + (with_bias ? out_c : 0);
  }

  Var<T> weight;
  Var<T> bias;
  ConvGeometry geometry;
};

/// group_norm -> relu -> conv2d.
template <typename T>
class ConvNode {
 public:
  ConvNode() = default;
  ConvNode(ParamRegistry<T>& reg, const std::string& prefix, int in_c, int out_c, int kernel, int stride,
           int norm_groups);

  Var<T> operator()(const Var<T>& x) const;
  void zero_conv() { conv.zero(); }

  static std::int64_t param_count(int in_c, int out_c, int kernel) {
    return 2LL * in_c + Conv<T>::param_count(in_c, out_c, kernel);
  }

  Var<T> gamma;
  Var<T> beta;
  Conv<T> conv;
  int norm_groups = 8;
};

struct BlockSizes {
  int feature_size = 256;
  int hidden_size = 64;
  int norm_groups = 8;
};

/// p + expand(conv3x3(reduce(p))).
template <typename T>
class BottleneckBlock {
 public:
  BottleneckBlock(ParamRegistry<T>& reg, const std::string& prefix, const BlockSizes& sizes);

  Var<T> operator()(const Var<T>& p) const;
  Var<T> residual(const Var<T>& p) const;
  void zero_residual() { expand.zero_conv(); }

  static std::int64_t param_count(const BlockSizes& s) {
    return ConvNode<T>::param_count(s.feature_size, s.hidden_size, 1) +
           ConvNode<T>::param_count(s.hidden_size, s.hidden_size, 3) +
           ConvNode<T>::param_count(s.hidden_size, s.feature_size, 1);
  }

  BlockSizes sizes;
  ConvNode<T> reduce;
  ConvNode<T> middle;
  ConvNode<T> expand;
};

/// P_l + resize(projection(P_{l+1}), size of P_l).
template <typename T>
class TopDownOp {
 public:
  TopDownOp(ParamRegistry<T>& reg, const std::string& prefix, const BlockSizes& sizes);

  Var<T> operator()(const Var<T>& p_l, const Var<T>& p_coarser) const;
  Var<T> residual(const Var<T>& p_coarser, std::int64_t out_h, std::int64_t out_w) const;
  void zero_residual() { projection.zero_conv(); }

  static std::int64_t param_count(const BlockSizes& s) {
    return ConvNode<T>::param_count(s.feature_size, s.feature_size, 1);
  }

  BlockSizes sizes;
  ConvNode<T> projection;
};

/// P_l + expand(conv3x3_stride2(reduce(P_{l-1}))).
template <typename T>
class BottomUpOp {
 public:
  BottomUpOp(ParamRegistry<T>& reg, const std::string& prefix, const BlockSizes& sizes);

  Var<T> operator()(const Var<T>& p_l, const Var<T>& p_finer) const;
  void zero_residual() { expand.zero_conv(); }

  static std::int64_t param_count(const BlockSizes& s) { return BottleneckBlock<T>::param_count(s); }

  BlockSizes sizes;
  ConvNode<T> reduce;
  ConvNode<T> middle;
  ConvNode<T> expand;
};

/// Laterals: 1x1 convs C3..C5 -> F. Extra levels: P6 = conv3x3/2(C5),
/// P7 = conv3x3/2(relu(P6)). No normalization anywhere in the stem.
template <typename T>
class PyramidStem {
 public:
  PyramidStem(ParamRegistry<T>& reg, const std::string& prefix, std::array<int, 3> in_channels, int feature_size);

  FeaturePyramid<T> operator()(const Var<T>& c3, const Var<T>& c4, const Var<T>& c5) const;

  static std::int64_t param_count(std::array<int, 3> in_channels, int feature_size) {
    std::int64_t total = 0;
    for (int c : in_channels) total += Conv<T>::param_count(c, feature_size, 1);
    return total + Conv<T>::param_count(in_channels[2], feature_size, 3) +
           Conv<T>::param_count(feature_size, feature_size, 3);
  }

  std::array<int, 3> in_channels;
  int feature_size;
  std::array<Conv<T>, 3> laterals;
  Conv<T> p6;
  Conv<T> p7;
};

}  // namespace tpn
