#include "tpn/backbone.hpp"

#include <stdexcept>

namespace tpn {

BackboneKind parse_backbone_kind(const std::string& name) {
  if (name == "tiny") return BackboneKind::Tiny;
  if (name == "resnet50-shape") return BackboneKind::ResNet50;
  if (name == "resnet101-shape") return BackboneKind::ResNet101;
  throw std::invalid_argument("unknown backbone '" + name + "' (expected tiny, resnet50-shape or resnet101-shape)");
}

std::string to_string(BackboneKind kind) {
  switch (kind) {
    case BackboneKind::Tiny: return "tiny";
    case BackboneKind::ResNet50: return "resnet50-shape";
    case BackboneKind::ResNet101: return "resnet101-shape";
  }
  return "?";
}

std::array<int, 3> BackboneSpec::out_channels() const {
  const auto n = widths.size();
  return {widths[n - 3], widths[n - 2], widths[n - 1]};
}

BackboneSpec make_backbone_spec(BackboneKind kind) {
  BackboneSpec s;
  s.kind = kind;
  switch (kind) {
    case BackboneKind::Tiny:
      s.depths = {2, 2, 2};
      s.widths = {64, 128, 256};
      s.stem_channels = 32;
      break;
    case BackboneKind::ResNet50:
      s.depths = {3, 4, 6, 3};
      s.widths = {256, 512, 1024, 2048};
      s.stem_channels = 64;
      break;
    case BackboneKind::ResNet101:
      s.depths = {3, 4, 23, 3};
      s.widths = {256, 512, 1024, 2048};
      s.stem_channels = 64;
      break;
  }
  return s;
}

std::vector<ResNetConv> resnet_convs(const BackboneSpec& spec, std::int64_t h, std::int64_t w) {
  if (spec.kind == BackboneKind::Tiny) throw std::invalid_argument("resnet_convs: not a ResNet spec");
  std::vector<ResNetConv> convs;
  auto push = [&](std::string name, int stage, int in_c, int out_c, int k, int stride, std::int64_t ih,
                  std::int64_t iw) {
    ResNetConv c{std::move(name), stage, in_c, out_c, k, stride, ih, iw, 0, 0};
    c.out_h = conv_out_size(ih, k, stride, k / 2);
    c.out_w = conv_out_size(iw, k, stride, k / 2);
    convs.push_back(c);
    return convs.back();
  };

  const auto stem = push("stem.conv", 0, 3, spec.stem_channels, 7, 2, h, w);
  // 3x3 stride-2 max pool.
  std::int64_t ch = conv_out_size(stem.out_h, 3, 2, 1);
  std::int64_t cw = conv_out_size(stem.out_w, 3, 2, 1);
  int in_c = spec.stem_channels;
  for (std::size_t s = 0; s < spec.depths.size(); ++s) {
    const int out_c = spec.widths[s];
    const int mid = out_c / 4;
    const int stage = static_cast<int>(s) + 1;
    for (int b = 0; b < spec.depths[s]; ++b) {
      const std::string prefix = "stage" + std::to_string(stage) + ".block" + std::to_string(b) + ".";
      const int stride = (b == 0 && s > 0) ? 2 : 1;
      const int block_in = b == 0 ? in_c : out_c;
      push(prefix + "conv1", stage, block_in, mid, 1, 1, ch, cw);
      const auto c2 = push(prefix + "conv2", stage, mid, mid, 3, stride, ch, cw);
      push(prefix + "conv3", stage, mid, out_c, 1, 1, c2.out_h, c2.out_w);
      if (b == 0) push(prefix + "downsample", stage, block_in, out_c, 1, stride, ch, cw);
      ch = c2.out_h;
      cw = c2.out_w;
    }
    in_c = out_c;
  }
  return convs;
}

BackboneCount count_backbone_params(const BackboneSpec& spec) {
  BackboneCount count;
  if (spec.kind == BackboneKind::Tiny) {
    count.total = TinyBackbone<float>::param_count();
    return count;
  }
  for (const auto& c : resnet_convs(spec)) {
    count.total += c.weight_count() + c.norm_count();
    count.frozen += c.norm_count();
    if (c.stage <= 1) count.frozen += c.weight_count();
  }
  return count;
}

template <typename T>
ResNetShape<T>::ResNetShape(ParamRegistry<T>& reg, const std::string& prefix, const BackboneSpec& s) : spec(s) {
  for (const auto& c : resnet_convs(spec)) {
    const std::string base = join_name(prefix, c.name);
    reg.constant(base + ".weight", {c.out_c, c.in_c, c.kernel, c.kernel}, T(0));
    reg.constant(base + ".bn.gamma", {1, c.out_c, 1, 1}, T(1));
    reg.constant(base + ".bn.beta", {1, c.out_c, 1, 1}, T(0));
  }
  for (auto& p : reg.params()) {
    if (!p.name.starts_with(prefix)) continue;
    const bool early = p.name.starts_with(join_name(prefix, "stem.")) || p.name.starts_with(join_name(prefix, "stage1."));
    if (early || p.name.find(".bn.") != std::string::npos) p.frozen = true;
  }
}

template <typename T>
Var<T> TinyBackbone<T>::BasicBlock::operator()(const Var<T>& x) const {
  const Var<T> skip = projected ? shortcut(x) : x;
  return ops::add(skip, b(a(x)));
}

template <typename T>
TinyBackbone<T>::TinyBackbone(ParamRegistry<T>& reg, const std::string& prefix, int norm_groups) {
  stem = Conv<T>(reg, join_name(prefix, "stem"), 3, kStemChannels, 3, 2);
  down = ConvNode<T>(reg, join_name(prefix, "down"), kStemChannels, kStageChannels[0], 3, 2, norm_groups);
  int in_c = kStageChannels[0];
  for (std::size_t s = 0; s < 3; ++s) {
    const int out_c = kStageChannels[s];
    for (std::size_t b = 0; b < 2; ++b) {
      const std::string p = join_name(prefix, "stage" + std::to_string(s + 1) + ".block" + std::to_string(b));
      const int stride = b == 0 ? 2 : 1;
      const int block_in = b == 0 ? in_c : out_c;
      BasicBlock& blk = stages[s][b];
      blk.a = ConvNode<T>(reg, join_name(p, "a"), block_in, out_c, 3, stride, norm_groups);
      blk.b = ConvNode<T>(reg, join_name(p, "b"), out_c, out_c, 3, 1, norm_groups);
      blk.projected = b == 0;
      if (blk.projected) blk.shortcut = Conv<T>(reg, join_name(p, "shortcut"), block_in, out_c, 1, stride);
    }
    in_c = out_c;
  }
}

template <typename T>
std::array<Var<T>, 3> TinyBackbone<T>::operator()(const Var<T>& image) const {
  const Shape& s = image.shape();
  if (s.c != 3) throw ShapeError("tiny backbone: expected 3 input channels, got " + std::to_string(s.c));
  if (s.h % 32 != 0 || s.w % 32 != 0) {
    throw ShapeError("tiny backbone: image size " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                     " is not divisible by 32");
  }
  Var<T> x = down(stem(image));
  std::array<Var<T>, 3> out;
  for (std::size_t st = 0; st < 3; ++st) {
    for (const auto& blk : stages[st]) x = blk(x);
    out[st] = x;
  }
  return out;
}

template <typename T>
std::int64_t TinyBackbone<T>::param_count() {
  std::int64_t n = Conv<T>::param_count(3, kStemChannels, 3) +
                   ConvNode<T>::param_count(kStemChannels, kStageChannels[0], 3);
  int in_c = kStageChannels[0];
  for (int out_c : kStageChannels) {
    n += ConvNode<T>::param_count(in_c, out_c, 3) + ConvNode<T>::param_count(out_c, out_c, 3) +
         Conv<T>::param_count(in_c, out_c, 1);
    n += 2 * (ConvNode<T>::param_count(out_c, out_c, 3));
    in_c = out_c;
  }
  return n;
}

template class ResNetShape<float>;
template class ResNetShape<double>;
template class TinyBackbone<float>;
template class TinyBackbone<double>;

}  // namespace tpn
