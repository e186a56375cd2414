#include "tpn/blocks.hpp"

namespace tpn {

template <typename T>
Conv<T>::Conv(ParamRegistry<T>& reg, const std::string& prefix, int in_c, int out_c, int kernel, int stride,
              int groups, bool with_bias)
    : geometry{stride, kernel / 2, groups} {
  if (in_c % groups != 0 || out_c % groups != 0) throw ShapeError("Conv: channels not divisible by groups");
  const std::int64_t fan_in = static_cast<std::int64_t>(in_c / groups) * kernel * kernel;
  weight = reg.kaiming(join_name(prefix, "weight"), {out_c, in_c / groups, kernel, kernel}, fan_in);
  if (with_bias) bias = reg.constant(join_name(prefix, "bias"), {1, out_c, 1, 1}, T(0));
}

template <typename T>
Var<T> Conv<T>::operator()(const Var<T>& x) const {
  return ops::conv2d(x, weight, bias, geometry);
}

template <typename T>
void Conv<T>::zero() {
  weight.mutable_value().fill(T(0));
  if (bias.defined()) bias.mutable_value().fill(T(0));
}

template <typename T>
ConvNode<T>::ConvNode(ParamRegistry<T>& reg, const std::string& prefix, int in_c, int out_c, int kernel, int stride,
                      int groups)
    : norm_groups(groups) {
  gamma = reg.constant(join_name(prefix, "gn.gamma"), {1, in_c, 1, 1}, T(1));
  beta = reg.constant(join_name(prefix, "gn.beta"), {1, in_c, 1, 1}, T(0));
  conv = Conv<T>(reg, join_name(prefix, "conv"), in_c, out_c, kernel, stride);
}

template <typename T>
Var<T> ConvNode<T>::operator()(const Var<T>& x) const {
  return conv(ops::relu(ops::group_norm(x, gamma, beta, norm_groups, kGroupNormEps)));
}

namespace {
void require_channels(const Shape& s, int expected, const char* what) {
  if (s.c != expected) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(expected) + " channels, got " +
                     std::to_string(s.c));
  }
}
}  // namespace

template <typename T>
BottleneckBlock<T>::BottleneckBlock(ParamRegistry<T>& reg, const std::string& prefix, const BlockSizes& s)
    : sizes(s),
      reduce(reg, join_name(prefix, "reduce"), s.feature_size, s.hidden_size, 1, 1, s.norm_groups),
      middle(reg, join_name(prefix, "middle"), s.hidden_size, s.hidden_size, 3, 1, s.norm_groups),
      expand(reg, join_name(prefix, "expand"), s.hidden_size, s.feature_size, 1, 1, s.norm_groups) {}

template <typename T>
Var<T> BottleneckBlock<T>::residual(const Var<T>& p) const {
  require_channels(p.shape(), sizes.feature_size, "bottleneck");
  return expand(middle(reduce(p)));
}

template <typename T>
Var<T> BottleneckBlock<T>::operator()(const Var<T>& p) const {
  return ops::add(p, residual(p));
}

template <typename T>
TopDownOp<T>::TopDownOp(ParamRegistry<T>& reg, const std::string& prefix, const BlockSizes& s)
    : sizes(s), projection(reg, join_name(prefix, "projection"), s.feature_size, s.feature_size, 1, 1, s.norm_groups) {}

template <typename T>
Var<T> TopDownOp<T>::residual(const Var<T>& p_coarser, std::int64_t out_h, std::int64_t out_w) const {
  require_channels(p_coarser.shape(), sizes.feature_size, "top-down source");
  return ops::bilinear_resize(projection(p_coarser), out_h, out_w);
}

template <typename T>
Var<T> TopDownOp<T>::operator()(const Var<T>& p_l, const Var<T>& p_coarser) const {
  require_channels(p_l.shape(), sizes.feature_size, "top-down target");
  return ops::add(p_l, residual(p_coarser, p_l.shape().h, p_l.shape().w));
}

template <typename T>
BottomUpOp<T>::BottomUpOp(ParamRegistry<T>& reg, const std::string& prefix, const BlockSizes& s)
    : sizes(s),
      reduce(reg, join_name(prefix, "reduce"), s.feature_size, s.hidden_size, 1, 1, s.norm_groups),
      middle(reg, join_name(prefix, "middle"), s.hidden_size, s.hidden_size, 3, 2, s.norm_groups),
      expand(reg, join_name(prefix, "expand"), s.hidden_size, s.feature_size, 1, 1, s.norm_groups) {}

template <typename T>
Var<T> BottomUpOp<T>::operator()(const Var<T>& p_l, const Var<T>& p_finer) const {
  require_channels(p_l.shape(), sizes.feature_size, "bottom-up target");
  require_channels(p_finer.shape(), sizes.feature_size, "bottom-up source");
  const Shape& fine = p_finer.shape();
  const Shape& target = p_l.shape();
  if (conv_out_size(fine.h, 3, 2, 1) != target.h || conv_out_size(fine.w, 3, 2, 1) != target.w) {
    throw ShapeError("bottom-up: source " + fine.str() + " does not downsample to target " + target.str());
  }
  return ops::add(p_l, expand(middle(reduce(p_finer))));
}

template <typename T>
PyramidStem<T>::PyramidStem(ParamRegistry<T>& reg, const std::string& prefix, std::array<int, 3> in_c, int f)
    : in_channels(in_c), feature_size(f) {
  for (int i = 0; i < 3; ++i) {
    laterals[static_cast<std::size_t>(i)] =
        Conv<T>(reg, join_name(prefix, "lateral" + std::to_string(i + 3)), in_c[static_cast<std::size_t>(i)], f, 1);
  }
  p6 = Conv<T>(reg, join_name(prefix, "p6"), in_c[2], f, 3, 2);
  p7 = Conv<T>(reg, join_name(prefix, "p7"), f, f, 3, 2);
}

template <typename T>
FeaturePyramid<T> PyramidStem<T>::operator()(const Var<T>& c3, const Var<T>& c4, const Var<T>& c5) const {
  require_channels(c3.shape(), in_channels[0], "stem C3");
  require_channels(c4.shape(), in_channels[1], "stem C4");
  require_channels(c5.shape(), in_channels[2], "stem C5");
  FeaturePyramid<T> pyr;
  pyr.min_level = 3;
  pyr.maps.push_back(laterals[0](c3));
  pyr.maps.push_back(laterals[1](c4));
  pyr.maps.push_back(laterals[2](c5));
  Var<T> p6_out = p6(c5);
  pyr.maps.push_back(p6_out);
  pyr.maps.push_back(p7(ops::relu(p6_out)));
  return pyr;
}

template class Conv<float>;
template class Conv<double>;
template class ConvNode<float>;
template class ConvNode<double>;
template class BottleneckBlock<float>;
template class BottleneckBlock<double>;
template class TopDownOp<float>;
template class TopDownOp<double>;
template class BottomUpOp<float>;
template class BottomUpOp<double>;
template class PyramidStem<float>;
template class PyramidStem<double>;

}  // namespace tpn
