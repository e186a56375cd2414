#include "tpn/detection.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace tpn {

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::vector<Box> level_anchors(const AnchorConfig& cfg, int level, std::int64_t h, std::int64_t w) {
  const double stride = AnchorConfig::stride(level);
  const double base = AnchorConfig::base_size(level);
  std::vector<std::array<double, 2>> shapes;  // (width, height)
  for (double s : cfg.scales) {
    for (double r : cfg.ratios) {
      const double size = base * s;
      const double aw = size / std::sqrt(r);
      shapes.push_back({aw, aw * r});
    }
  }
  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(h * w) * shapes.size());
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const double cx = (static_cast<double>(x) + cfg.offset) * stride;
      const double cy = (static_cast<double>(y) + cfg.offset) * stride;
      for (const auto& [aw, ah] : shapes) anchors.push_back({cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2});
    }
  }
  return anchors;
}

namespace {
// Caps exp() of size deltas so decoding cannot overflow.
const double kMaxLogScale = std::log(1000.0 / 16.0);
}  // namespace

std::array<double, 4> encode_box(const Box& box, const Box& anchor) {
  const double aw = anchor.width();
  const double ah = anchor.height();
  const double acx = anchor.x1 + 0.5 * aw;
  const double acy = anchor.y1 + 0.5 * ah;
  const double gw = box.width();
  const double gh = box.height();
  const double gcx = box.x1 + 0.5 * gw;
  const double gcy = box.y1 + 0.5 * gh;
  return {(gcx - acx) / aw, (gcy - acy) / ah, std::log(gw / aw), std::log(gh / ah)};
}

Box decode_box(const std::array<double, 4>& d, const Box& anchor) {
  const double aw = anchor.width();
  const double ah = anchor.height();
  const double cx = anchor.x1 + 0.5 * aw + d[0] * aw;
  const double cy = anchor.y1 + 0.5 * ah + d[1] * ah;
  const double w = aw * std::exp(std::min(d[2], kMaxLogScale));
  const double h = ah * std::exp(std::min(d[3], kMaxLogScale));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

std::vector<int> match_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gts, const MatchConfig& cfg) {
  for (const auto& g : gts) {
    if (!(g.width() > 0) || !(g.height() > 0)) throw std::invalid_argument("match_anchors: degenerate gt box");
  }
  std::vector<int> result(anchors.size(), kNegative);
  if (gts.empty()) return result;
  std::vector<double> best_for_gt(gts.size(), -1.0);
  std::vector<std::size_t> best_anchor(gts.size(), 0);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    double best = 0.0;
    int arg = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchors[a], gts[g]);
      if (v > best) {
        best = v;
        arg = static_cast<int>(g);
      }
      if (v > best_for_gt[g]) {
        best_for_gt[g] = v;
        best_anchor[g] = a;
      }
    }
    if (arg >= 0 && best >= cfg.positive) {
      result[a] = arg;
    } else if (best >= cfg.negative) {
      result[a] = kIgnore;
    }
  }
  if (cfg.allow_low_quality) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (best_for_gt[g] > 0.0) result[best_anchor[g]] = static_cast<int>(g);
    }
  }
  return result;
}

template <typename T>
std::vector<LevelTargets<T>> build_targets(const HeadOutput<T>& out, const GroundTruth& gt, int num_classes,
                                           const AnchorConfig& anchor_cfg, const LossConfig& cfg) {
  const int A = anchor_cfg.count();
  const std::size_t levels = out.levels.size();
  if (levels == 0) return {};
  const std::int64_t batch = out.levels[0].cls.shape().n;
  if (static_cast<std::int64_t>(gt.size()) != batch) throw ShapeError("build_targets: batch/gt size mismatch");

  std::vector<LevelTargets<T>> targets(levels);
  std::vector<Box> all;
  std::vector<std::size_t> level_start;
  for (std::size_t li = 0; li < levels; ++li) {
    const Shape& cs = out.levels[li].cls.shape();
    if (cs.c != static_cast<std::int64_t>(A) * num_classes) throw ShapeError("build_targets: class channel mismatch");
    targets[li].cls_target = Tensor<T>(cs);
    targets[li].cls_mask = Tensor<T>(cs);
    targets[li].box_target = Tensor<T>(out.levels[li].box.shape());
    targets[li].box_mask = Tensor<T>(out.levels[li].box.shape());
    level_start.push_back(all.size());
    const auto anchors = level_anchors(anchor_cfg, out.min_level + static_cast<int>(li), cs.h, cs.w);
    all.insert(all.end(), anchors.begin(), anchors.end());
  }
  level_start.push_back(all.size());

  for (std::int64_t n = 0; n < batch; ++n) {
    std::vector<Box> boxes;
    for (const auto& ann : gt[static_cast<std::size_t>(n)]) {
      if (ann.cls < 0 || ann.cls >= num_classes) throw std::invalid_argument("build_targets: class id out of range");
      boxes.push_back(ann.box);
    }
    const auto match = match_anchors(all, boxes, cfg.match);
    for (std::size_t li = 0; li < levels; ++li) {
      auto& t = targets[li];
      const Shape& cs = t.cls_target.shape();
      for (std::size_t idx = level_start[li]; idx < level_start[li + 1]; ++idx) {
        const int m = match[idx];
        if (m == kIgnore) continue;
        const std::int64_t local = static_cast<std::int64_t>(idx - level_start[li]);
        const std::int64_t pos = local / A;
        const std::int64_t a = local % A;
        const std::int64_t y = pos / cs.w;
        const std::int64_t x = pos % cs.w;
        for (int k = 0; k < num_classes; ++k) t.cls_mask.at(n, a * num_classes + k, y, x) = T(1);
        if (m == kNegative) continue;
        const auto& ann = gt[static_cast<std::size_t>(n)][static_cast<std::size_t>(m)];
        t.cls_target.at(n, a * num_classes + ann.cls, y, x) = T(1);
        const auto delta = encode_box(ann.box, all[idx]);
        for (int j = 0; j < 4; ++j) {
          t.box_target.at(n, a * 4 + j, y, x) = static_cast<T>(delta[static_cast<std::size_t>(j)]);
          t.box_mask.at(n, a * 4 + j, y, x) = T(1);
        }
        ++t.positives;
      }
    }
  }
  return targets;
}

template <typename T>
LossBreakdown<T> detection_loss(const HeadOutput<T>& out, const std::vector<LevelTargets<T>>& targets,
                                const LossConfig& cfg) {
  if (targets.size() != out.levels.size()) throw ShapeError("detection_loss: level count mismatch");
  LossBreakdown<T> lb;
  lb.min_level = out.min_level;
  for (std::size_t li = 0; li < targets.size(); ++li) {
    const auto& t = targets[li];
    const auto& o = out.levels[li];
    const Var<T> cls = ops::sigmoid_focal_loss(o.cls, t.cls_target, t.cls_mask, cfg.alpha, cfg.gamma);
    const Var<T> box = ops::smooth_l1_loss(o.box, t.box_target, t.box_mask, cfg.beta);
    const double norm = static_cast<double>(std::max<std::int64_t>(1, t.positives));
    const Var<T> level_total = ops::scale(ops::add(cls, box), 1.0 / norm);
    lb.total = lb.total.defined() ? ops::add(lb.total, level_total) : level_total;
    lb.cls_raw.push_back(cls.value()[0]);
    lb.box_raw.push_back(box.value()[0]);
    lb.cls.push_back(cls.value()[0] / norm);
    lb.box.push_back(box.value()[0] / norm);
    lb.positives.push_back(t.positives);
  }
  lb.total_value = lb.total.defined() ? static_cast<double>(lb.total.value()[0]) : 0.0;
  return lb;
}

template <typename T>
LossBreakdown<T> detection_loss(const HeadOutput<T>& out, const GroundTruth& gt, int num_classes,
                                const AnchorConfig& anchors, const LossConfig& cfg) {
  return detection_loss(out, build_targets(out, gt, num_classes, anchors, cfg), cfg);
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores, double iou_thresh) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  std::vector<int> keep;
  std::vector<bool> removed(boxes.size(), false);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const int a = order[i];
    if (removed[static_cast<std::size_t>(a)]) continue;
    keep.push_back(a);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const int b = order[j];
      if (!removed[static_cast<std::size_t>(b)] &&
          iou(boxes[static_cast<std::size_t>(a)], boxes[static_cast<std::size_t>(b)]) > iou_thresh) {
        removed[static_cast<std::size_t>(b)] = true;
      }
    }
  }
  return keep;
}

template <typename T>
std::vector<Detection> decode_detections(const HeadOutput<T>& out, int image, int num_classes, std::int64_t image_h,
                                         std::int64_t image_w, const AnchorConfig& anchor_cfg,
                                         const DecodeConfig& cfg) {
  const int A = anchor_cfg.count();
  std::vector<Detection> candidates;
  for (std::size_t li = 0; li < out.levels.size(); ++li) {
    const auto& cls = out.levels[li].cls.value();
    const auto& box = out.levels[li].box.value();
    const Shape& cs = cls.shape();
    const auto anchors = level_anchors(anchor_cfg, out.min_level + static_cast<int>(li), cs.h, cs.w);
    struct Cand {
      double score;
      std::int64_t anchor;
      int cls;
    };
    std::vector<Cand> level;
    for (std::int64_t y = 0; y < cs.h; ++y)
      for (std::int64_t x = 0; x < cs.w; ++x)
        for (int a = 0; a < A; ++a)
          for (int k = 0; k < num_classes; ++k) {
            const double z = cls.at(image, a * num_classes + k, y, x);
            const double p = 1.0 / (1.0 + std::exp(-z));
            if (p > cfg.score_thresh) level.push_back({p, (y * cs.w + x) * A + a, k});
          }
    std::stable_sort(level.begin(), level.end(), [](const Cand& a, const Cand& b) { return a.score > b.score; });
    if (static_cast<int>(level.size()) > cfg.topk_per_level) level.resize(static_cast<std::size_t>(cfg.topk_per_level));
    for (const auto& c : level) {
      const std::int64_t pos = c.anchor / A;
      const std::int64_t a = c.anchor % A;
      const std::int64_t y = pos / cs.w;
      const std::int64_t x = pos % cs.w;
      std::array<double, 4> d{};
      for (int j = 0; j < 4; ++j) d[static_cast<std::size_t>(j)] = box.at(image, a * 4 + j, y, x);
      Box b = decode_box(d, anchors[static_cast<std::size_t>(c.anchor)]);
      b.x1 = std::clamp(b.x1, 0.0, static_cast<double>(image_w));
      b.x2 = std::clamp(b.x2, 0.0, static_cast<double>(image_w));
      b.y1 = std::clamp(b.y1, 0.0, static_cast<double>(image_h));
      b.y2 = std::clamp(b.y2, 0.0, static_cast<double>(image_h));
      candidates.push_back({image, c.cls, c.score, b});
    }
  }

  std::vector<Detection> result;
  for (int k = 0; k < num_classes; ++k) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    std::vector<std::size_t> index;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      if (candidates[i].cls != k) continue;
      boxes.push_back(candidates[i].box);
      scores.push_back(candidates[i].score);
      index.push_back(i);
    }
    for (int kept : nms(boxes, scores, cfg.iou_thresh)) result.push_back(candidates[index[static_cast<std::size_t>(kept)]]);
  }
  std::stable_sort(result.begin(), result.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (static_cast<int>(result.size()) > cfg.max_detections) result.resize(static_cast<std::size_t>(cfg.max_detections));
  return result;
}

namespace {

double ap_101(const std::vector<double>& precision, const std::vector<double>& recall) {
  std::vector<double> env = precision;
  for (std::size_t i = env.size(); i-- > 1;) env[i - 1] = std::max(env[i - 1], env[i]);
  double total = 0;
  for (int r = 0; r <= 100; ++r) {
    const double thr = r / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), thr);
    if (it != recall.end()) total += env[static_cast<std::size_t>(it - recall.begin())];
  }
  return total / 101.0;
}

}  // namespace

APResult evaluate_ap(const std::vector<Detection>& detections, const GroundTruth& gt, int num_classes) {
  constexpr int kThresholds = 10;
  std::array<double, kThresholds> per_t{};
  int classes = 0;
  for (int k = 0; k < num_classes; ++k) {
    std::int64_t total_gt = 0;
    for (const auto& img : gt)
      for (const auto& a : img) total_gt += a.cls == k;
    if (total_gt == 0) continue;
    ++classes;
    std::vector<const Detection*> preds;
    for (const auto& d : detections)
      if (d.cls == k) preds.push_back(&d);
    std::stable_sort(preds.begin(), preds.end(), [](const Detection* a, const Detection* b) { return a->score > b->score; });

    for (int ti = 0; ti < kThresholds; ++ti) {
      const double thr = 0.5 + 0.05 * ti;
      std::vector<std::vector<bool>> used(gt.size());
      for (std::size_t i = 0; i < gt.size(); ++i) used[i].assign(gt[i].size(), false);
      std::vector<double> precision;
      std::vector<double> recall;
      double tp = 0;
      double fp = 0;
      for (const Detection* d : preds) {
        int best = -1;
        double best_iou = thr;
        if (d->image >= 0 && static_cast<std::size_t>(d->image) < gt.size()) {
          const auto& anns = gt[static_cast<std::size_t>(d->image)];
          for (std::size_t g = 0; g < anns.size(); ++g) {
            if (anns[g].cls != k || used[static_cast<std::size_t>(d->image)][g]) continue;
            const double v = iou(d->box, anns[g].box);
            if (v >= best_iou) {
              best_iou = v;
              best = static_cast<int>(g);
            }
          }
        }
        if (best >= 0) {
          used[static_cast<std::size_t>(d->image)][static_cast<std::size_t>(best)] = true;
          tp += 1;
        } else {
          fp += 1;
        }
        precision.push_back(tp / (tp + fp));
        recall.push_back(tp / static_cast<double>(total_gt));
      }
      per_t[static_cast<std::size_t>(ti)] += ap_101(precision, recall);
    }
  }
  APResult r;
  if (classes == 0) return r;
  for (double v : per_t) r.ap += v / classes;
  r.ap /= kThresholds;
  r.ap50 = per_t[0] / classes;
  r.ap75 = per_t[5] / classes;
  return r;
}

void write_detections_csv(std::ostream& os, const std::vector<Detection>& detections) {
  os << "image_id,class,score,x1,y1,x2,y2\n";
  char buf[256];
  for (const auto& d : detections) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.6f,%.3f,%.3f,%.3f,%.3f\n", d.image, d.cls, d.score, d.box.x1, d.box.y1,
                  d.box.x2, d.box.y2);
    os << buf;
  }
}

#define TPN_INSTANTIATE_DETECTION(T)                                                                               \
  template std::vector<LevelTargets<T>> build_targets(const HeadOutput<T>&, const GroundTruth&, int,               \
                                                      const AnchorConfig&, const LossConfig&);                     \
  template LossBreakdown<T> detection_loss(const HeadOutput<T>&, const std::vector<LevelTargets<T>>&,              \
                                           const LossConfig&);                                                     \
  template LossBreakdown<T> detection_loss(const HeadOutput<T>&, const GroundTruth&, int, const AnchorConfig&,     \
                                           const LossConfig&);                                                     \
  template std::vector<Detection> decode_detections(const HeadOutput<T>&, int, int, std::int64_t, std::int64_t,    \
                                                    const AnchorConfig&, const DecodeConfig&);

TPN_INSTANTIATE_DETECTION(float)
TPN_INSTANTIATE_DETECTION(double)
#undef TPN_INSTANTIATE_DETECTION

}  // namespace tpn
