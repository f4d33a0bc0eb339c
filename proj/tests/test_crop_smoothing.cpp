#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "owclip/crop_smoothing.hpp"

namespace owclip {
namespace {

TEST(SampleCrop, FullImageWhenBoundsAreOne) {
  const CropSpec c = sample_crop(42, 1.0, 1.0);
  EXPECT_EQ(c.epsilon, 1.0);
  EXPECT_EQ(c.x0, 0.0);
  EXPECT_EQ(c.y0, 0.0);
}

TEST(SampleCrop, DeterministicAndInsideImage) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const CropSpec a = sample_crop(seed, 0.3, 1.0);
    const CropSpec b = sample_crop(seed, 0.3, 1.0);
    ASSERT_EQ(a.epsilon, b.epsilon);
    ASSERT_EQ(a.x0, b.x0);
    ASSERT_EQ(a.y0, b.y0);
    ASSERT_GT(a.epsilon, 0.3);
    ASSERT_LE(a.epsilon, 1.0);
    ASSERT_GE(a.x0, 0.0);
    ASSERT_GE(a.y0, 0.0);
    ASSERT_LE(a.x0 + a.side(), 1.0 + 1e-12);
    ASSERT_LE(a.y0 + a.side(), 1.0 + 1e-12);
  }
}

TEST(SampleCrop, MeanOfUniformEpsilon) {
  double sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) sum += sample_crop(derive_seed(7, i), 0.3, 1.0).epsilon;
  EXPECT_NEAR(sum / n, 0.65, 0.01);
}

TEST(SampleCrop, InvalidBoundsAreConfigErrors) {
  EXPECT_THROW(sample_crop(1, 0.0, 0.5), ConfigError);
  EXPECT_THROW(sample_crop(1, 0.6, 0.5), ConfigError);
  EXPECT_THROW(sample_crop(1, 0.3, 1.2), ConfigError);
}

TEST(BuildTarget, HandEvaluatedExamples) {
  const auto one_hot = build_target(5, 1.0, 1.0, 2, 0.3);
  EXPECT_EQ(one_hot.dense(), (Vector{0, 0, 1, 0, 0}));

  const auto a = build_target(5, 1.0, 0.8, 0, 0.3);
  EXPECT_NEAR(a.gt_mass, 0.8, 1e-15);
  EXPECT_NEAR(a.other_mass, 0.05, 1e-15);

  const auto b = build_target(4, 1.0, 0.4, 1, 0.3);
  EXPECT_NEAR(b.gt_mass, 0.4, 1e-15);
  EXPECT_NEAR(b.other_mass, 0.2, 1e-15);
}

TEST(BuildTarget, GuardAndInputErrors) {
  EXPECT_THROW(build_target(5, 1.0, 0.3, 0, 0.3), GuardError);
  EXPECT_THROW(build_target(5, 1.0, 0.2, 0, 0.3), GuardError);
  EXPECT_THROW(build_target(1, 1.0, 0.9, 0, 0.3), InputError);
  EXPECT_THROW(build_target(5, 1.0, 0.9, 5, 0.3), InputError);
  EXPECT_THROW(build_target(5, 0.0, 0.9, 0, 0.3), InputError);
  EXPECT_THROW(build_target(5, 1.0, 1.5, 0, 0.3), InputError);
}

TEST(BuildTarget, MassesSumToOneAndGtMonotoneInEpsilon) {
  Rng rng(99);
  for (int i = 0; i < 10000; ++i) {
    const std::size_t q = 2 + rng.index(60);
    const double d = 1.0 - rng.uniform();  // (0, 1]
    const double eps_min = 0.05;
    const double e1 = eps_min + (1.0 - eps_min) * (1.0 - rng.uniform());
    const double e2 = eps_min + (1.0 - eps_min) * (1.0 - rng.uniform());
    const auto t = build_target(q, d, e1, rng.index(q), eps_min);
    double sum = 0.0;
    for (double m : t.dense()) {
      ASSERT_GE(m, 0.0);
      sum += m;
    }
    ASSERT_NEAR(sum, 1.0, 1e-12);
    if (e1 != e2) {
      const auto u = build_target(q, d, e2, t.gt_index, eps_min);
      ASSERT_EQ(e1 < e2, t.gt_mass < u.gt_mass);
    }
    ASSERT_EQ(t.gt_mass >= t.other_mass, d * e1 >= 1.0 / static_cast<double>(q) - 1e-15);
  }
}

TEST(CropSmoothingLoss, ZeroForPerfectOneHot) {
  const auto t = build_target(4, 1.0, 1.0, 3, 0.3);
  EXPECT_EQ(crop_smoothing_loss(t, Vector{0, 0, 0, 1}), 0.0);
}

TEST(CropSmoothingLoss, TwoClassHalfHalfIsLn2) {
  const auto t = build_target(2, 1.0, 0.8, 0, 0.3);
  EXPECT_NEAR(t.other_mass, 0.2, 1e-15);
  EXPECT_NEAR(crop_smoothing_loss(t, Vector{0.5, 0.5}), 0.693147, 1e-6);
}

TEST(CropSmoothingLoss, MinimizedAtTargetWithEntropyValue) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t q = 2 + rng.index(8);
    const auto t = build_target(q, 1.0 - 0.5 * rng.uniform(), 0.35 + 0.65 * rng.uniform(), rng.index(q), 0.3);
    const Vector y = t.dense();
    double entropy = 0.0;
    for (double m : y) entropy -= m > 0 ? m * std::log(m) : 0.0;
    const double at_target = crop_smoothing_loss(t, y);
    ASSERT_NEAR(at_target, entropy, 1e-12);
    for (int k = 0; k < 20; ++k) {
      Vector p(q);
      double s = 0.0;
      for (std::size_t i = 0; i < q; ++i) {
        p[i] = y[i] * std::exp(0.3 * rng.normal());
        s += p[i];
      }
      for (double& v : p) v /= s;
      ASSERT_GE(crop_smoothing_loss(t, p), at_target - 1e-12);
    }
  }
}

TEST(CropSmoothingLoss, OneHotEqualsCrossEntropy) {
  Rng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t q = 2 + rng.index(10);
    const std::size_t j = rng.index(q);
    Vector p(q);
    double s = 0.0;
    for (double& v : p) s += (v = rng.uniform() + 1e-3);
    for (double& v : p) v /= s;
    const auto t = build_target(q, 1.0, 1.0, j, 0.3);
    ASSERT_NEAR(crop_smoothing_loss(t, p), -std::log(p[j]), 1e-12);
  }
}

TEST(CropSmoothingLoss, QMismatchIsDimensionError) {
  const auto t = build_target(3, 1.0, 1.0, 0, 0.3);
  EXPECT_THROW(crop_smoothing_loss(t, Vector{0.5, 0.5}), DimensionError);
}

TEST(CropSmoothingLoss, LogitPathAgreesAndGradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t q = 2 + rng.index(6);
    const auto t = build_target(q, 0.7 + 0.3 * rng.uniform(), 0.4 + 0.6 * rng.uniform(), rng.index(q), 0.3);
    Vector z(q);
    for (double& v : z) v = 3.0 * rng.normal();
    const LossGrad lg = crop_smoothing_loss_from_logits(t, z);
    ASSERT_NEAR(lg.loss, crop_smoothing_loss(t, lg.probs), 1e-10);
    for (std::size_t k = 0; k < q; ++k) {
      const double h = 1e-6;
      Vector up = z, down = z;
      up[k] += h;
      down[k] -= h;
      const double fd = (crop_smoothing_loss_from_logits(t, up).loss -
                         crop_smoothing_loss_from_logits(t, down).loss) / (2 * h);
      ASSERT_NEAR(lg.grad_logits[k], fd, 1e-7);
    }
  }
}

TEST(MakeTrainSamples, SimpleWithoutCropsIsPlainOneHot) {
  CropSmoothingConfig cfg;
  const Vector img(16, 0.5);
  const auto s = make_train_samples(img, 1, Difficulty::kSimple, 0, 5, cfg, 9);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].target.dense(), (Vector{0, 1, 0, 0, 0}));
  EXPECT_EQ(s[0].image, img);
}

TEST(MakeTrainSamples, HardUsesDHard) {
  CropSmoothingConfig cfg;
  cfg.d_hard = 0.7;
  const auto s = make_train_samples(Vector(16, 1.0), 0, Difficulty::kHard, 3, 5, cfg, 9);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_NEAR(s[0].target.gt_mass, 0.7, 1e-15);
  EXPECT_NEAR(s[0].target.other_mass, 0.075, 1e-15);
  EXPECT_FALSE(s[0].crop.has_value());
}

TEST(MakeTrainSamples, SimpleCropsCarryTheirEpsilon) {
  CropSmoothingConfig cfg;
  const Vector img(16, 1.0);
  const auto s = make_train_samples(img, 2, Difficulty::kSimple, 3, 6, cfg, 1234);
  ASSERT_EQ(s.size(), 4u);
  EXPECT_EQ(s[0].target.gt_mass, 1.0);
  for (std::size_t i = 1; i < 4; ++i) {
    const CropSpec c = sample_crop(derive_seed(1234, i - 1), cfg.epsilon_min, cfg.epsilon_max);
    ASSERT_TRUE(s[i].crop.has_value());
    EXPECT_EQ(s[i].crop->epsilon, c.epsilon);
    EXPECT_EQ(s[i].target.gt_mass, 1.0 * c.epsilon);
    EXPECT_NEAR(s[i].target.other_mass, (1.0 - c.epsilon) / 5.0, 1e-15);
  }
}

TEST(MakeTrainSamples, OneHotModeSkipsCropsAndHardMass) {
  CropSmoothingConfig cfg;
  const auto s = make_train_samples(Vector(4, 1.0), 0, Difficulty::kHard, 3, 4, cfg, 1, true);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].target.gt_mass, 1.0);
}

TEST(InversionWarnings, FlagsSmallQ) {
  CropSmoothingConfig cfg;  // epsilon_min 0.3, d_hard 0.7
  const auto any_q = target_inversion_warnings(cfg);
  ASSERT_EQ(any_q.size(), 1u);
  EXPECT_NE(any_q[0].find("Q < 4"), std::string::npos);
  EXPECT_EQ(target_inversion_warnings(cfg, 4).size(), 0u);
  EXPECT_EQ(target_inversion_warnings(cfg, 3).size(), 1u);
  cfg.d_hard = 0.2;
  EXPECT_EQ(target_inversion_warnings(cfg, 4).size(), 1u);
}

}  // namespace
}  // namespace owclip
