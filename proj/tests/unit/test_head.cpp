#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "test_util.hpp"
#include "tpn/detection.hpp"
#include "tpn/gradcheck.hpp"

using namespace tpn;
using tpn::testing::random_pyramid;
using tpn::testing::random_tensor;
using tpn::testing::random_var;

namespace {

HeadSpec small_head(int classes = 3) {
  HeadSpec s;
  s.hidden_layers = 1;
  s.num_classes = classes;
  s.feature_size = 16;
  s.norm_groups = 4;
  return s;
}

// Head output of constant logits / deltas on a given set of level sizes.
HeadOutput<double> constant_output(const std::vector<std::int64_t>& sizes, int classes, double logit, double delta,
                                   int batch = 1) {
  HeadOutput<double> out;
  out.min_level = 3;
  for (auto s : sizes) {
    out.levels.push_back({Var<double>(Tensor<double>({batch, 9 * classes, s, s}, logit), true),
                          Var<double>(Tensor<double>({batch, 36, s, s}, delta), true)});
  }
  return out;
}

}  // namespace

TEST_CASE("head: parameter count by enumeration") {
  // Two subnets x (3x3 conv 256->256 with bias + GN affine), then 1x1 finals
  // producing 9*80 and 9*4 channels.
  const std::int64_t hidden = 256 * 256 * 9 + 256 + 512;
  const std::int64_t expected = 2 * hidden + (256 * 720 + 720) + (256 * 36 + 36);
  CHECK(expected == 1'375'476);
  HeadSpec spec;
  CHECK(head_param_count(spec) == expected);
  ParamRegistry<float> reg(0);
  Head<float> head(reg, "head", spec);
  std::int64_t n = 0;
  for (const auto& p : reg.params()) n += p.var.value().numel();
  CHECK(n == expected);

  spec.hidden_layers = 4;
  spec.final_kernel = 3;
  ParamRegistry<float> reg4(0);
  Head<float> head4(reg4, "head", spec);
  n = 0;
  for (const auto& p : reg4.params()) n += p.var.value().numel();
  CHECK(n == head_param_count(spec));
  CHECK(head_param_count(spec) == 2 * 4 * hidden + (256 * 720 * 9 + 720) + (256 * 36 * 9 + 36));
}

TEST_CASE("head: output shapes, shared weights and prior bias") {
  ParamRegistry<double> reg(1);
  Head<double> head(reg, "head", small_head());
  const auto pyr = random_pyramid<double>(16, 8, 2);
  NoGradGuard guard;
  const auto out = head(pyr);
  REQUIRE(out.levels.size() == 5);
  for (int i = 0; i < 5; ++i) {
    const auto& s = pyr.maps[static_cast<std::size_t>(i)].shape();
    CHECK(out.levels[static_cast<std::size_t>(i)].cls.shape() == Shape{1, 27, s.h, s.w});
    CHECK(out.levels[static_cast<std::size_t>(i)].box.shape() == Shape{1, 36, s.h, s.w});
  }
  CHECK_THROWS_AS(head.apply(random_var<double>({1, 8, 4, 4}, 3)), ShapeError);

  // Level equivariance: permuting the levels permutes the outputs.
  FeaturePyramid<double> swapped = pyr;
  std::swap(swapped.maps[0], swapped.maps[2]);
  const auto out2 = head(swapped);
  CHECK(bit_equal(out2.levels[0].cls.value(), out.levels[2].cls.value()));
  CHECK(bit_equal(out2.levels[2].box.value(), out.levels[0].box.value()));

  const double b = head.cls.final.bias.value()[0];
  CHECK(b == doctest::Approx(-std::log(99.0)));
  head.cls.final.weight.mutable_value().fill(0.0);
  const auto zeroed = head(pyr);
  for (const auto& lvl : zeroed.levels)
    for (double z : lvl.cls.value()) CHECK(1.0 / (1.0 + std::exp(-z)) == doctest::Approx(0.01));
}

TEST_CASE("head: gradient check") {
  ParamRegistry<double> reg(4);
  Head<double> head(reg, "head", small_head());
  Rng rng(5);
  for (auto& p : reg.params()) {
    if (p.name.ends_with("beta")) for (auto& v : p.var.mutable_value()) v = rng.uniform(-0.2, 0.2);
  }
  const auto p = random_var<double>({1, 16, 4, 4}, 6);
  std::vector<Var<double>> inputs{p};
  for (auto& q : reg.params()) inputs.push_back(q.var);
  const auto c1 = random_tensor<double>({1, 27, 4, 4}, 7);
  const auto c2 = random_tensor<double>({1, 36, 4, 4}, 8);
  const auto r = grad_check(
      [&](const auto& in) {
        const auto o = head.apply(in[0]);
        return ops::add(ops::weighted_sum(o.cls, c1), ops::weighted_sum(o.box, c2));
      },
      inputs, {1e-5, 25, 9});
  CAPTURE(r.worst);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("anchors: sizes, ratios and layout") {
  AnchorConfig cfg;
  CHECK(cfg.count() == 9);
  const auto a = level_anchors(cfg, 3, 2, 3);
  CHECK(a.size() == 9 * 2 * 3);
  // Scale 1, ratio 1 anchor at location (0, 0): 32 x 32 centered on the origin.
  CHECK(a[1].width() == doctest::Approx(32.0));
  CHECK(a[1].height() == doctest::Approx(32.0));
  CHECK(a[1].x1 == doctest::Approx(-16.0));
  // Ratio 0.5 has height / width = 0.5 with area preserved.
  CHECK(a[0].height() / a[0].width() == doctest::Approx(0.5));
  CHECK(a[0].width() * a[0].height() == doctest::Approx(32.0 * 32.0));
  // Scale 2^(2/3), ratio 2, at location (y=1, x=2): center (16, 8).
  const Box& last = a.back();
  CHECK(last.height() / last.width() == doctest::Approx(2.0));
  CHECK(0.5 * (last.x1 + last.x2) == doctest::Approx(16.0));
  CHECK(0.5 * (last.y1 + last.y2) == doctest::Approx(8.0));
  CHECK(std::sqrt(last.area()) == doctest::Approx(32.0 * std::pow(2.0, 2.0 / 3.0)));
  CHECK(level_anchors(cfg, 7, 1, 1)[1].width() == doctest::Approx(512.0));
  CHECK(level_anchors(cfg, 7, 1, 1)[4].width() == doctest::Approx(512.0 * std::cbrt(2.0)));
}

TEST_CASE("matcher") {
  const Box gt{0, 0, 10, 10};
  SUBCASE("identical anchor is positive") {
    const auto m = match_anchors({gt}, {gt});
    CHECK(m[0] == 0);
  }
  SUBCASE("disjoint anchor is negative") {
    const auto m = match_anchors({gt, {20, 20, 30, 30}}, {gt});
    CHECK(m[1] == kNegative);
  }
  SUBCASE("IoU 0.45 is ignored") {
    const Box crafted{0, 0, 10, 4.5};
    CHECK(iou(crafted, gt) == doctest::Approx(0.45));
    const auto m = match_anchors({gt, crafted}, {gt});
    CHECK(m[0] == 0);
    CHECK(m[1] == kIgnore);
  }
  SUBCASE("every gt claims its best anchor even below the positive threshold") {
    const Box weak{0, 0, 10, 3};
    const auto m = match_anchors({weak, {50, 50, 60, 60}}, {gt});
    CHECK(m[0] == 0);
    MatchConfig strict;
    strict.allow_low_quality = false;
    CHECK(match_anchors({weak}, {gt}, strict)[0] == kNegative);
  }
  SUBCASE("positive goes to the best-IoU gt") {
    const auto m = match_anchors({{0, 0, 10, 10}}, {{1, 0, 11, 10}, {0, 0, 10, 9.5}});
    CHECK(m[0] == 1);
  }
  CHECK_THROWS_AS(match_anchors({gt}, {{5, 5, 5, 9}}), std::invalid_argument);
}

TEST_CASE("box coder round trip") {
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.uniform(0, 100);
    const double y = rng.uniform(0, 100);
    const Box box{x, y, x + rng.uniform(1, 80), y + rng.uniform(1, 80)};
    const double ax = rng.uniform(0, 100);
    const double ay = rng.uniform(0, 100);
    const Box anchor{ax, ay, ax + rng.uniform(8, 64), ay + rng.uniform(8, 64)};
    const Box back = decode_box(encode_box(box, anchor), anchor);
    for (auto [a, b] : {std::pair{back.x1, box.x1}, {back.y1, box.y1}, {back.x2, box.x2}, {back.y2, box.y2}}) {
      CHECK(std::abs(a - b) <= 1e-5 * std::max(1.0, std::abs(b)));
    }
  }
  const Box anchor{4, 4, 36, 36};
  const Box same = decode_box({0, 0, 0, 0}, anchor);
  CHECK(same.x1 == anchor.x1);
  CHECK(same.y2 == anchor.y2);
}

TEST_CASE("focal loss: single anchor at p = 0.5 on its true class") {
  const Var<double> z(Tensor<double>({1, 1, 1, 1}, 0.0), true);
  const Tensor<double> t({1, 1, 1, 1}, 1.0);
  const Tensor<double> m({1, 1, 1, 1}, 1.0);
  const auto loss = ops::sigmoid_focal_loss(z, t, m, 0.25, 2.0);
  CHECK(loss.value()[0] == doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-14));
  const Tensor<double> neg({1, 1, 1, 1}, 0.0);
  CHECK(ops::sigmoid_focal_loss(z, neg, m, 0.25, 2.0).value()[0] ==
        doctest::Approx(0.75 * 0.25 * std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("detection loss: normalization, limits and empty images") {
  const std::vector<std::int64_t> sizes{8, 4, 2, 1, 1};
  const GroundTruth gt{{{{10, 12, 40, 44}, 1}, {{30, 2, 60, 20}, 2}}};

  SUBCASE("empty image: box loss 0, divisor 1") {
    const auto out = constant_output(sizes, 3, -2.0, 0.3);
    const auto lb = detection_loss(out, GroundTruth{{}}, 3);
    double expected_total = 0;
    for (std::size_t l = 0; l < sizes.size(); ++l) {
      CHECK(lb.positives[l] == 0);
      CHECK(lb.box[l] == 0.0);
      CHECK(lb.cls[l] == lb.cls_raw[l]);
      // All-negative focal loss for logit -2 over every class channel.
      const double p = 1.0 / (1.0 + std::exp(2.0));
      const double per = 0.75 * p * p * -std::log(1.0 - p);
      CHECK(lb.cls[l] == doctest::Approx(per * 27.0 * static_cast<double>(sizes[l] * sizes[l])));
      expected_total += lb.cls[l];
    }
    CHECK(lb.total_value == doctest::Approx(expected_total));
  }

  SUBCASE("perfect predictions drive the loss to zero") {
    auto out = constant_output(sizes, 3, 0.0, 0.0);
    const auto targets = build_targets(out, gt, 3, AnchorConfig{}, LossConfig{});
    for (std::size_t l = 0; l < sizes.size(); ++l) {
      auto& cls = out.levels[l].cls.mutable_value();
      auto& box = out.levels[l].box.mutable_value();
      for (std::int64_t i = 0; i < cls.numel(); ++i) cls[i] = targets[l].cls_target[i] > 0 ? 60.0 : -60.0;
      for (std::int64_t i = 0; i < box.numel(); ++i) box[i] = targets[l].box_target[i];
    }
    const auto lb = detection_loss(out, targets, LossConfig{});
    CHECK(lb.total_value < 1e-12);
    std::int64_t positives = 0;
    for (auto p : lb.positives) positives += p;
    CHECK(positives >= 2);
  }

  SUBCASE("duplicating the image leaves the normalized loss unchanged") {
    const auto one = detection_loss(constant_output(sizes, 3, -1.0, 0.2), gt, 3);
    const auto two = detection_loss(constant_output(sizes, 3, -1.0, 0.2, 2), GroundTruth{gt[0], gt[0]}, 3);
    for (std::size_t l = 0; l < sizes.size(); ++l) {
      CHECK(two.positives[l] == 2 * one.positives[l]);
      CHECK(two.cls_raw[l] == doctest::Approx(2 * one.cls_raw[l]));
      if (one.positives[l] > 0) {
        CHECK(two.cls[l] == doctest::Approx(one.cls[l]));
        CHECK(two.box[l] == doctest::Approx(one.box[l]));
      }
    }
  }

  SUBCASE("gradient of the normalized loss") {
    auto out = constant_output({4, 2, 1, 1, 1}, 3, 0.0, 0.0);
    Rng rng(3);
    std::vector<Var<double>> inputs;
    for (auto& l : out.levels) {
      for (auto& v : l.cls.mutable_value()) v = rng.uniform(-2, 2);
      for (auto& v : l.box.mutable_value()) v = rng.uniform(-0.5, 0.5);
      inputs.push_back(l.cls);
      inputs.push_back(l.box);
    }
    const GroundTruth small{{{{2, 2, 20, 18}, 0}}};
    const auto targets = build_targets(out, small, 3, AnchorConfig{}, LossConfig{});
    const auto r = grad_check(
        [&](const auto& in) {
          HeadOutput<double> o;
          for (std::size_t i = 0; i < in.size(); i += 2) o.levels.push_back({in[i], in[i + 1]});
          return detection_loss(o, targets, LossConfig{}).total;
        },
        inputs, {1e-5, 40, 4});
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_CASE("nms: greedy rule") {
  CHECK(nms({{0, 0, 10, 10}, {0, 0, 10, 10}}, {0.9, 0.8}, 0.5) == std::vector<int>{0});
  // B overlaps A (IoU 0.818) and is suppressed; C overlaps B (0.538) but only
  // A (0.429) among the kept boxes, so it survives.
  const std::vector<Box> boxes{{0, 0, 10, 10}, {1, 0, 11, 10}, {4, 0, 14, 10}};
  CHECK(iou(boxes[0], boxes[1]) == doctest::Approx(90.0 / 110.0));
  CHECK(iou(boxes[1], boxes[2]) == doctest::Approx(70.0 / 130.0));
  CHECK(iou(boxes[0], boxes[2]) == doctest::Approx(60.0 / 140.0));
  CHECK(nms(boxes, {0.9, 0.8, 0.7}, 0.5) == std::vector<int>{0, 2});
  CHECK(nms(boxes, {0.7, 0.9, 0.8}, 0.5) == std::vector<int>{1});
}

TEST_CASE("decode: zero deltas reproduce anchors, scores sorted") {
  auto out = constant_output({2, 1, 1, 1, 1}, 3, -10.0, 0.0);
  out.levels[0].cls.mutable_value().at(0, 4 * 3 + 1, 1, 0) = 3.0;  // anchor 4 at (y=1, x=0), class 1
  out.levels[0].cls.mutable_value().at(0, 0, 0, 1) = 1.0;          // anchor 0 at (y=0, x=1), class 0
  const auto dets = decode_detections(out, 0, 3, 1000, 1000);
  REQUIRE(dets.size() == 2);
  CHECK(dets[0].score > dets[1].score);
  CHECK(dets[0].cls == 1);
  const auto anchors = level_anchors(AnchorConfig{}, 3, 2, 2);
  const Box& expected = anchors[(1 * 2 + 0) * 9 + 4];
  // Anchor (-16+0, 8-16, ...) gets clipped at the image border.
  CHECK(dets[0].box.x2 == doctest::Approx(expected.x2));
  CHECK(dets[0].box.y2 == doctest::Approx(expected.y2));
  CHECK(dets[0].box.x1 == doctest::Approx(std::max(0.0, expected.x1)));
  CHECK(dets[0].box.y1 == doctest::Approx(std::max(0.0, expected.y1)));

  std::ostringstream os;
  write_detections_csv(os, dets);
  CHECK(os.str().rfind("image_id,class,score,x1,y1,x2,y2\n0,1,", 0) == 0);
}

TEST_CASE("AP evaluator") {
  const GroundTruth gt{{{{0, 0, 10, 10}, 0}, {{20, 20, 30, 30}, 0}}};
  SUBCASE("perfect predictions") {
    const std::vector<Detection> dets{{0, 0, 1.0, {0, 0, 10, 10}}, {0, 0, 1.0, {20, 20, 30, 30}}};
    const auto r = evaluate_ap(dets, gt, 1);
    CHECK(r.ap == doctest::Approx(1.0));
    CHECK(r.ap50 == doctest::Approx(1.0));
  }
  SUBCASE("no predictions") { CHECK(evaluate_ap({}, gt, 1).ap == 0.0); }
  SUBCASE("one correct then one spurious") {
    // Recall 0.5 at precision 1, then a false positive: 101-point sampling
    // takes precision 1 at recall 0.00..0.50 (51 points) and 0 above.
    const std::vector<Detection> dets{{0, 0, 0.9, {0, 0, 10, 10}}, {0, 0, 0.8, {50, 50, 60, 60}}};
    const auto r = evaluate_ap(dets, gt, 1);
    CHECK(r.ap50 == doctest::Approx(51.0 / 101.0).epsilon(1e-12));
    CHECK(r.ap == doctest::Approx(51.0 / 101.0).epsilon(1e-12));
  }
  SUBCASE("localization quality splits AP50 and AP75") {
    // IoU 0.6 with the first gt: a hit at 0.50..0.60, a miss above.
    const std::vector<Detection> dets{{0, 0, 0.9, {0, 0, 10, 6}}, {0, 0, 0.8, {20, 20, 30, 30}}};
    const auto r = evaluate_ap(dets, gt, 1);
    CHECK(r.ap50 == doctest::Approx(1.0));
    CHECK(r.ap75 < 1.0);
    CHECK(r.ap < r.ap50);
  }
  SUBCASE("duplicate detection counts as false positive") {
    const std::vector<Detection> dets{{0, 0, 0.9, {0, 0, 10, 10}}, {0, 0, 0.8, {0, 0, 10, 10}},
                                      {0, 0, 0.7, {20, 20, 30, 30}}};
    const auto r = evaluate_ap(dets, gt, 1);
    // PR: (0.5, 1), (0.5, 0.5), (1, 2/3); envelope 1 up to 0.5, 2/3 above.
    CHECK(r.ap50 == doctest::Approx((51.0 + 50.0 * 2.0 / 3.0) / 101.0));
  }
}
