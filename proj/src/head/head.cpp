#include "tpn/head.hpp"

#include <cmath>
#include <stdexcept>

namespace tpn {

void HeadSpec::validate() const {
  if (hidden_layers < 0) throw std::invalid_argument("head: C must be >= 0");
  if (num_classes < 1 || anchors < 1) throw std::invalid_argument("head: num_classes and anchors must be >= 1");
  if (final_kernel < 1 || final_kernel % 2 == 0) throw std::invalid_argument("head: final_kernel must be odd");
  if (feature_size % norm_groups != 0) throw std::invalid_argument("head: feature_size not divisible by groups");
  if (!(prior > 0.0 && prior < 1.0)) throw std::invalid_argument("head: prior must lie in (0, 1)");
}

std::int64_t head_param_count(const HeadSpec& s) {
  const std::int64_t f = s.feature_size;
  const std::int64_t hidden = s.hidden_layers * (Conv<float>::param_count(s.feature_size, s.feature_size, 3) + 2 * f);
  const std::int64_t cls_final = Conv<float>::param_count(s.feature_size, s.anchors * s.num_classes, s.final_kernel);
  const std::int64_t box_final = Conv<float>::param_count(s.feature_size, s.anchors * 4, s.final_kernel);
  return 2 * hidden + cls_final + box_final;
}

template <typename T>
Head<T>::Head(ParamRegistry<T>& reg, const std::string& prefix, const HeadSpec& s) : spec(s) {
  spec.validate();
  auto build = [&](Subnet& net, const std::string& name, int out_c) {
    const std::string base = join_name(prefix, name);
    for (int i = 0; i < spec.hidden_layers; ++i) {
      const std::string p = join_name(base, "hidden" + std::to_string(i));
      net.hidden.emplace_back(reg, join_name(p, "conv"), spec.feature_size, spec.feature_size, 3);
      net.gamma.push_back(reg.constant(join_name(p, "gn.gamma"), {1, spec.feature_size, 1, 1}, T(1)));
      net.beta.push_back(reg.constant(join_name(p, "gn.beta"), {1, spec.feature_size, 1, 1}, T(0)));
    }
    net.final = Conv<T>(reg, join_name(base, "final"), spec.feature_size, out_c, spec.final_kernel);
  };
  build(cls, "cls", spec.anchors * spec.num_classes);
  build(box, "box", spec.anchors * 4);
  cls.final.bias.mutable_value().fill(static_cast<T>(-std::log((1.0 - spec.prior) / spec.prior)));
}

template <typename T>
Var<T> Head<T>::run(const Subnet& net, const Var<T>& x) const {
  Var<T> h = x;
  for (std::size_t i = 0; i < net.hidden.size(); ++i) {
    h = ops::relu(ops::group_norm(net.hidden[i](h), net.gamma[i], net.beta[i], spec.norm_groups, kGroupNormEps));
  }
  return net.final(h);
}

template <typename T>
LevelOutput<T> Head<T>::apply(const Var<T>& p) const {
  if (p.shape().c != spec.feature_size) {
    throw ShapeError("head: expected " + std::to_string(spec.feature_size) + " channels, got " +
                     std::to_string(p.shape().c));
  }
  return {run(cls, p), run(box, p)};
}

template <typename T>
HeadOutput<T> Head<T>::operator()(const FeaturePyramid<T>& pyramid) const {
  HeadOutput<T> out;
  out.min_level = pyramid.min_level;
  for (const auto& m : pyramid.maps) out.levels.push_back(apply(m));
  return out;
}

template class Head<float>;
template class Head<double>;

}  // namespace tpn
