#pragma once

// Anchors, anchor matching, detection loss, decoding with NMS and a COCO-style
// AP evaluator. Box coordinates are (x1, y1, x2, y2) in image pixels.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "tpn/head.hpp"

namespace tpn {

struct Box {
  double x1 = 0;
  double y1 = 0;
  double x2 = 0;
  double y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
};

double iou(const Box& a, const Box& b);

struct Annotation {
  Box box;
  int cls = 0;
};

/// Per image ground truth.
using GroundTruth = std::vector<std::vector<Annotation>>;

// Defaults of the common RetinaNet reference implementation.
struct AnchorConfig {
  std::array<double, 3> scales{1.0, 1.2599210498948732, 1.5874010519681994};  // 2^0, 2^(1/3), 2^(2/3)
  std::array<double, 3> ratios{0.5, 1.0, 2.0};                                  // height / width
  /// Anchor centers sit at (x + offset) * stride.
  double offset = 0.0;

  int count() const { return static_cast<int>(scales.size() * ratios.size()); }
  static double base_size(int level) { return std::ldexp(1.0, level + 2); }
  static double stride(int level) { return std::ldexp(1.0, level); }
};

/// Anchors of one level; anchor index = (y * w + x) * A + a, with
/// a = scale_index * ratios + ratio_index.
std::vector<Box> level_anchors(const AnchorConfig& cfg, int level, std::int64_t h, std::int64_t w);

/// Standard center / log-size parameterization with unit weights.
std::array<double, 4> encode_box(const Box& box, const Box& anchor);
Box decode_box(const std::array<double, 4>& delta, const Box& anchor);

inline constexpr int kNegative = -1;
inline constexpr int kIgnore = -2;

struct MatchConfig {
  double positive = 0.5;
  double negative = 0.4;
  bool allow_low_quality = true;
};

/// Per anchor: index of the matched gt (positive), kNegative or kIgnore.
/// Throws std::invalid_argument on a zero-area gt box.
std::vector<int> match_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gts,
                               const MatchConfig& cfg = {});

struct LossConfig {
  double alpha = 0.25;
  double gamma = 2.0;
  double beta = 0.1;  // smooth-L1 transition
  MatchConfig match;
};

template <typename T>
struct LevelTargets {
  Tensor<T> cls_target;
  Tensor<T> cls_mask;
  Tensor<T> box_target;
  Tensor<T> box_mask;
  std::int64_t positives = 0;
};

/// Matches every image's gt against the anchors of all levels jointly and
/// scatters the result into the head's output layout.
template <typename T>
std::vector<LevelTargets<T>> build_targets(const HeadOutput<T>& out, const GroundTruth& gt, int num_classes,
                                           const AnchorConfig& anchors, const LossConfig& cfg);

template <typename T>
struct LossBreakdown {
  int min_level = 3;
  std::vector<double> cls_raw;  // summed over the level, before normalization
  std::vector<double> box_raw;
  std::vector<double> cls;      // divided by max(1, positives)
  std::vector<double> box;
  std::vector<std::int64_t> positives;
  double total_value = 0;
  Var<T> total;
};

template <typename T>
LossBreakdown<T> detection_loss(const HeadOutput<T>& out, const std::vector<LevelTargets<T>>& targets,
                                const LossConfig& cfg);

template <typename T>
LossBreakdown<T> detection_loss(const HeadOutput<T>& out, const GroundTruth& gt, int num_classes,
                                const AnchorConfig& anchors = {}, const LossConfig& cfg = {});

struct Detection {
  int image = 0;
  int cls = 0;
  double score = 0;
  Box box;
};

struct DecodeConfig {
  double score_thresh = 0.05;
  double iou_thresh = 0.5;
  int topk_per_level = 1000;
  int max_detections = 100;
};

/// Greedy NMS; returns kept indices in descending score order (ties by index).
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores, double iou_thresh);

/// Decodes image `image` of the batch: threshold, top-k per level, decode,
/// clip to the image, per-class NMS. Sorted by descending score.
template <typename T>
std::vector<Detection> decode_detections(const HeadOutput<T>& out, int image, int num_classes, std::int64_t image_h,
                                         std::int64_t image_w, const AnchorConfig& anchors = {},
                                         const DecodeConfig& cfg = {});

struct APResult {
  double ap = 0;    // mean over IoU 0.50:0.05:0.95
  double ap50 = 0;
  double ap75 = 0;
};

/// 101-point interpolated AP averaged over classes that have ground truth.
APResult evaluate_ap(const std::vector<Detection>& detections, const GroundTruth& gt, int num_classes);

/// CSV: image_id,class,score,x1,y1,x2,y2
void write_detections_csv(std::ostream& os, const std::vector<Detection>& detections);

}  // namespace tpn
