#include <gtest/gtest.h>

#include "owclip/evaluation.hpp"
#include "owclip/rng.hpp"
#include "oracles.hpp"

namespace owclip {
namespace {

TEST(Iou, HandValues) {
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {0, 5, 10, 15}), 50.0 / 150.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {0, 0, 10, 10}), 1.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {10, 0, 20, 10}), 0.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 2, 2}, {1, 1, 3, 3}), 1.0 / 7.0);
}

TEST(AveragePrecision, SingleMatchIsOne) {
  // (0,0,10,10) vs (0,0,10,6): IoU 60/100.
  const auto ap = average_precision({{"img", "zebra", 0.9, {0, 0, 10, 6}}}, {{"img", "zebra", {0, 0, 10, 10}}});
  ASSERT_TRUE(ap);
  EXPECT_DOUBLE_EQ(*ap, 1.0);
}

TEST(AveragePrecision, NoDetectionsIsZero) {
  EXPECT_DOUBLE_EQ(*average_precision({}, {{"img", "zebra", {0, 0, 10, 10}}}), 0.0);
}

TEST(AveragePrecision, BelowThresholdIsFalsePositive) {
  const auto m = match_detections({{"img", "zebra", 0.9, {0, 5, 10, 15}}}, {{"img", "zebra", {0, 0, 10, 10}}});
  EXPECT_FALSE(m.true_positive[0]);
  EXPECT_DOUBLE_EQ(*average_precision({{"img", "zebra", 0.9, {0, 5, 10, 15}}}, {{"img", "zebra", {0, 0, 10, 10}}}),
                   0.0);
}

TEST(AveragePrecision, NoGroundTruthIsUndefined) {
  EXPECT_FALSE(average_precision({{"img", "zebra", 0.9, {0, 0, 1, 1}}}, {}).has_value());
}

TEST(AveragePrecision, EachGroundTruthMatchedOnce) {
  // Two detections on one object: the second is a duplicate.
  const auto ap = average_precision({{"i", "a", 0.9, {0, 0, 10, 10}}, {"i", "a", 0.8, {0, 0, 10, 10}}},
                                    {{"i", "a", {0, 0, 10, 10}}});
  EXPECT_DOUBLE_EQ(*ap, 1.0);
  // FP ranked first: precision at recall 1 is 1/2.
  const auto ap2 = average_precision({{"i", "a", 0.9, {50, 50, 60, 60}}, {"i", "a", 0.8, {0, 0, 10, 10}}},
                                     {{"i", "a", {0, 0, 10, 10}}});
  EXPECT_DOUBLE_EQ(*ap2, 0.5);
  // Matching is per image.
  EXPECT_DOUBLE_EQ(*average_precision({{"j", "a", 0.9, {0, 0, 10, 10}}}, {{"i", "a", {0, 0, 10, 10}}}), 0.0);
}

TEST(AveragePrecision, HandCurve) {
  // Ranked TP, FP, TP over 3 gts: precisions 1, 1/2, 2/3 at recalls 1/3, 1/3, 2/3.
  // Envelope: 1 up to 1/3, 2/3 up to 2/3 -> AP = 1/3 + (1/3)(2/3) = 5/9.
  const std::vector<GroundTruth> g = {{"i", "a", {0, 0, 10, 10}}, {"i", "a", {20, 0, 30, 10}}, {"i", "a", {40, 0, 50, 10}}};
  const std::vector<Detection> d = {{"i", "a", 0.9, {0, 0, 10, 10}},
                                    {"i", "a", 0.8, {100, 100, 110, 110}},
                                    {"i", "a", 0.7, {20, 0, 30, 10}}};
  EXPECT_NEAR(*average_precision(d, g), 5.0 / 9.0, 1e-15);
}

TEST(AveragePrecision, MatchesBruteForceOracle) {
  Rng rng(2024);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n_images = 1 + rng.index(4);
    std::vector<GroundTruth> gts;
    const std::size_t n_gt = 1 + rng.index(20);
    for (std::size_t i = 0; i < n_gt; ++i) {
      const double x = std::floor(rng.uniform() * 40), y = std::floor(rng.uniform() * 40);
      gts.push_back({"im" + std::to_string(rng.index(n_images)), "c", {x, y, x + 5 + rng.index(10), y + 5 + rng.index(10)}});
    }
    std::vector<Detection> dets;
    const std::size_t n_det = rng.index(101);
    for (std::size_t i = 0; i < n_det; ++i) {
      Box b;
      if (rng.uniform() < 0.6) {
        const auto& g = gts[rng.index(gts.size())].box;
        const double jx = std::floor(rng.uniform() * 5) - 2, jy = std::floor(rng.uniform() * 5) - 2;
        b = {g.x1 + jx, g.y1 + jy, g.x2 + jx, g.y2 + jy};
      } else {
        const double x = std::floor(rng.uniform() * 50), y = std::floor(rng.uniform() * 50);
        b = {x, y, x + 3 + rng.index(12), y + 3 + rng.index(12)};
      }
      // Coarse confidences force ties.
      dets.push_back({"im" + std::to_string(rng.index(n_images)), "c", std::floor(rng.uniform() * 10) / 10, b});
    }
    ASSERT_NEAR(*average_precision(dets, gts), oracle::average_precision(dets, gts), 1e-12) << "trial " << trial;
  }
}

TEST(EvaluateDetections, GroupMeansAndMissingGroundTruth) {
  const std::vector<GroundTruth> gts = {{"i", "a", {0, 0, 10, 10}}, {"i", "b", {20, 0, 30, 10}}};
  const std::vector<Detection> dets = {{"i", "a", 0.9, {0, 0, 10, 10}}, {"i", "b", 0.8, {0, 0, 10, 10}}};
  const auto r = evaluate_detections(
      dets, gts, {{"a", ClassGroup::kPrevious}, {"b", ClassGroup::kCurrent}, {"c", ClassGroup::kCurrent}});
  EXPECT_DOUBLE_EQ(r.per_class_ap.at("a"), 1.0);
  EXPECT_DOUBLE_EQ(r.per_class_ap.at("b"), 0.0);
  EXPECT_FALSE(r.per_class_ap.count("c"));
  EXPECT_EQ(r.warnings.size(), 1u);
  EXPECT_DOUBLE_EQ(*r.map_previous_known, 1.0);
  EXPECT_DOUBLE_EQ(*r.map_current_known, 0.0);
  EXPECT_DOUBLE_EQ(*r.map_both, 0.5);
  const nlohmann::json j = r;
  EXPECT_TRUE(j.at("unknown_recall").is_null());
}

}  // namespace
}  // namespace owclip
