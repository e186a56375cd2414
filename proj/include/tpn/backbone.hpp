#pragma once

// Backbones emitting C3..C5.
//
// ResNet-50/101 exist here only as shape descriptions for parameter and FLOP
// accounting. TinyBackbone is the small pre-activation network used for
// desk-scale training.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tpn/blocks.hpp"

namespace tpn {

enum class BackboneKind { Tiny, ResNet50, ResNet101 };

/// "tiny", "resnet50-shape", "resnet101-shape".
BackboneKind parse_backbone_kind(const std::string& name);
std::string to_string(BackboneKind kind);

struct BackboneSpec {
  BackboneKind kind = BackboneKind::Tiny;
  std::vector<int> depths;           // blocks per stage
  std::vector<int> widths;           // stage output channels
  int stem_channels = 0;

  /// Channels of C3, C4, C5.
  std::array<int, 3> out_channels() const;
};

BackboneSpec make_backbone_spec(BackboneKind kind);

/// One convolution of a ResNet trunk, with the affine norm that follows it.
struct ResNetConv {
  std::string name;   // e.g. "stage2.block0.conv2"
  int stage = 0;      // 0 = stem
  int in_c = 0;
  int out_c = 0;
  int kernel = 1;
  int stride = 1;
  std::int64_t in_h = 0;
  std::int64_t in_w = 0;
  std::int64_t out_h = 0;
  std::int64_t out_w = 0;

  std::int64_t weight_count() const { return static_cast<std::int64_t>(out_c) * in_c * kernel * kernel; }
  std::int64_t norm_count() const { return 2LL * out_c; }
  std::int64_t macs() const { return weight_count() * out_h * out_w; }
};

/// Every conv of a ResNet bottleneck trunk (stride on the 3x3 conv,
/// projection shortcut in each stage's first block) for an h x w image.
std::vector<ResNetConv> resnet_convs(const BackboneSpec& spec, std::int64_t h = 224, std::int64_t w = 224);

struct BackboneCount {
  std::int64_t total = 0;
  /// Stem and stage-1 conv weights plus every norm affine pair.
  std::int64_t frozen = 0;
};

/// Exact parameter enumeration; frozen parameters included in `total`.
BackboneCount count_backbone_params(const BackboneSpec& spec);

/// Registers a ResNet trunk's parameters (zero-filled) so it can be enumerated
/// like any other module. There is no forward pass.
template <typename T>
class ResNetShape {
 public:
  ResNetShape(ParamRegistry<T>& reg, const std::string& prefix, const BackboneSpec& spec);
  BackboneSpec spec;
};

/// Input stride 2 stem conv 3->32, a stride-2 conv node 32->64, then three
/// stages of two pre-activation basic blocks (64, 128, 256 channels), each
/// stage halving the resolution. Emits C3 (64ch), C4 (128ch), C5 (256ch).
template <typename T>
class TinyBackbone {
 public:
  struct BasicBlock {
    ConvNode<T> a;
    ConvNode<T> b;
    Conv<T> shortcut;  // undefined weight on identity blocks
    bool projected = false;

    Var<T> operator()(const Var<T>& x) const;
  };

  TinyBackbone(ParamRegistry<T>& reg, const std::string& prefix, int norm_groups = 8);

  /// Throws ShapeError unless h and w are divisible by 32 and c == 3.
  std::array<Var<T>, 3> operator()(const Var<T>& image) const;

  static constexpr std::array<int, 3> kStageChannels{64, 128, 256};
  static constexpr int kStemChannels = 32;
  static std::int64_t param_count();

  Conv<T> stem;
  ConvNode<T> down;
  std::array<std::array<BasicBlock, 2>, 3> stages;
};

extern template class ResNetShape<float>;
extern template class ResNetShape<double>;
extern template class TinyBackbone<float>;
extern template class TinyBackbone<double>;

}  // namespace tpn
