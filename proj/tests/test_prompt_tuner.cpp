#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "owclip/prompt_tuner.hpp"

namespace owclip {
namespace {

ClassEntry entry(std::string label, Vector ctx, int episode = 1) {
  ClassEntry e;
  e.label = std::move(label);
  e.context = std::move(ctx);
  e.episode_id = episode;
  return e;
}

TEST(InitClassEntry, MeanOfPhraseEmbeddings) {
  HashTextEncoder text(16);
  const auto single = init_class_entry("zebra", {"striped coat"}, text);
  EXPECT_EQ(single.context, text.encode("striped coat"));

  const Vector u = text.encode("striped coat"), v = text.encode("erect mane");
  Vector mid(16);
  for (std::size_t i = 0; i < 16; ++i) mid[i] = (u[i] + v[i]) / 2.0;
  const Vector want = l2_normalized(mid);
  const auto two = init_class_entry("zebra", {"striped coat", "erect mane"}, text);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(two.context[i], want[i], 1e-15);

  EXPECT_THROW(init_class_entry("zebra", {}, text), InputError);
  EXPECT_EQ(label_only_phrases("zebra"), (std::vector<std::string>{"a photo of zebra"}));
}

TEST(Classify, HandComputedSoftmax) {
  // Embedding (1, 0); contexts chosen so the cosines are 0.9 and 0.1.
  ClassFeatureSource src;
  src.add(entry("a", {0.9, std::sqrt(1 - 0.81)}));
  src.add(entry("b", {0.1, std::sqrt(1 - 0.01)}));
  const LogitsRow row = classify(Vector{1.0, 0.0}, src, 0.1);
  EXPECT_NEAR(row.scores[0], 0.9, 1e-12);
  EXPECT_NEAR(row.scores[1], 0.1, 1e-12);
  EXPECT_NEAR(row.probs[0], 0.999664, 1e-6);
  EXPECT_NEAR(row.probs[1], 0.000335, 1e-6);
}

TEST(Classify, LimitingAndSymmetricCases) {
  ClassFeatureSource src;
  src.add(entry("x", {1, 0, 0}));
  src.add(entry("y", {0, 1, 0}));
  src.add(entry("z", {0, 0, 1}));
  const LogitsRow sharp = classify(Vector{0, 1, 0}, src, 0.01);
  EXPECT_NEAR(sharp.probs[1], 1.0, 1e-12);

  const LogitsRow flat = classify(Vector{1, 1, 1}, src, 0.07);
  for (double p : flat.probs) EXPECT_NEAR(p, 1.0 / 3.0, 1e-12);

  EXPECT_THROW(classify(Vector{1, 0, 0}, ClassFeatureSource{}, 0.07), StateError);
}

TEST(Classify, ScaleInvariantInEmbedding) {
  Rng rng(12);
  ClassFeatureSource src;
  for (int k = 0; k < 6; ++k) {
    Vector c(8);
    for (double& v : c) v = rng.normal();
    src.add(entry("c" + std::to_string(k), l2_normalized(c)));
  }
  for (int trial = 0; trial < 200; ++trial) {
    Vector e(8);
    for (double& v : e) v = rng.normal();
    const double alpha = std::exp(4.0 * rng.normal());
    Vector scaled = e;
    for (double& v : scaled) v *= alpha;
    const auto a = classify(e, src, 0.07), b = classify(scaled, src, 0.07);
    ASSERT_EQ(argmax(a.probs), argmax(b.probs));
    for (std::size_t k = 0; k < a.probs.size(); ++k) ASSERT_NEAR(a.probs[k], b.probs[k], 1e-9);
  }
}

TEST(RouteProposal, ThresholdBoundaryAndTies) {
  ClassFeatureSource src;
  src.add(entry("a", {1, 0}));
  src.add(entry("b", {0, 1}));
  LogitsRow row;
  row.probs = {0.95, 0.05};
  auto d = route_proposal(row, src, 0.5);
  EXPECT_TRUE(d.known);
  EXPECT_EQ(d.label, "a");
  row.probs = {0.49, 0.51};
  EXPECT_TRUE(route_proposal(row, src, 0.5).known);
  row.probs = {0.49, 0.49};
  EXPECT_FALSE(route_proposal(row, src, 0.5).known);

  // Symmetric contexts around the embedding tie exactly; lower index wins.
  const auto tie = classify(Vector{1, 1}, src, 0.07);
  ASSERT_EQ(tie.probs[0], tie.probs[1]);
  const auto decision = route_proposal(tie, src, 0.5);
  EXPECT_TRUE(decision.known);
  EXPECT_EQ(*decision.class_index, 0u);

  EXPECT_THROW(route_proposal(row, src, 1.0), ConfigError);
}

TEST(RouteProposal, MonotoneInThreshold) {
  Rng rng(8);
  ClassFeatureSource src;
  for (int k = 0; k < 5; ++k) {
    Vector c(6);
    for (double& v : c) v = rng.normal();
    src.add(entry("k" + std::to_string(k), l2_normalized(c)));
  }
  for (int trial = 0; trial < 500; ++trial) {
    Vector e(6);
    for (double& v : e) v = rng.normal();
    const double t1 = 0.01 + 0.98 * rng.uniform();
    const double t2 = t1 + (0.99 - t1) * rng.uniform();
    const bool k1 = route_proposal(e, src, 0.07, t1).known;
    const bool k2 = route_proposal(e, src, 0.07, t2).known;
    ASSERT_TRUE(k1 || !k2);
  }
}

TEST(GradientCheck, QuadraticIsExact) {
  const Vector a = {1.0, -2.0, 0.5, 3.0};
  auto f = [&](std::span<const double> x, Vector* g) {
    double s = 0.0;
    if (g) g->assign(x.size(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      s += a[i] * x[i] * x[i] + x[i];
      if (g) (*g)[i] = 2 * a[i] * x[i] + 1.0;
    }
    return s;
  };
  EXPECT_LT(gradient_check(f, {0.3, -1.1, 2.0, 0.7}, 1e-4), 1e-8);
}

struct Clusters {
  std::vector<Vector> centroids;
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> test;
};

Clusters gaussian_clusters(std::size_t classes, std::size_t per_class, std::uint64_t seed,
                           double spread = 0.6, std::size_t first_class = 0) {
  Rng rng(seed);
  Clusters c;
  for (std::size_t k = 0; k < classes; ++k) {
    Vector m(16);
    for (double& v : m) v = rng.normal();
    c.centroids.push_back(m);
  }
  for (std::size_t k = 0; k < classes; ++k) {
    for (std::size_t i = 0; i < 2 * per_class; ++i) {
      LabeledImage img;
      img.class_index = first_class + k;
      img.image = c.centroids[k];
      for (double& v : img.image) v += rng.normal(0.0, spread);
      (i < per_class ? c.train : c.test).push_back(std::move(img));
    }
  }
  return c;
}

std::vector<ClassEntry> phrase_entries(const std::vector<std::string>& labels, const TextEncoder& text) {
  std::vector<ClassEntry> out;
  for (const auto& l : labels) out.push_back(init_class_entry(l, {l + " shape", l + " texture"}, text));
  return out;
}

// Nearest-centroid oracle on base-encoder embeddings.
double nearest_centroid_accuracy(const ImageEncoder& enc, const std::vector<LabeledImage>& train,
                                 const std::vector<LabeledImage>& eval, std::size_t q) {
  std::vector<Vector> sums(q, Vector(enc.output_dim(), 0.0));
  for (const auto& t : train) {
    const Vector e = enc.encode(t.image);
    for (std::size_t j = 0; j < e.size(); ++j) sums[t.class_index][j] += e[j];
  }
  std::size_t hit = 0;
  for (const auto& t : eval) {
    const Vector e = enc.encode(t.image);
    std::size_t best = 0;
    double best_s = -2;
    for (std::size_t k = 0; k < q; ++k) {
      const double s = cosine_similarity(e, sums[k]);
      if (s > best_s) best_s = s, best = k;
    }
    hit += best == t.class_index;
  }
  return static_cast<double>(hit) / static_cast<double>(eval.size());
}

std::vector<TrainSample> random_batch(const IncrementalClassifier& clf, std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  CropSmoothingConfig cfg;
  std::vector<TrainSample> batch;
  for (std::size_t i = 0; i < n; ++i) {
    Vector img(16);
    for (double& v : img) v = rng.normal();
    const auto k = rng.index(clf.source().size());
    auto s = make_train_samples(img, k, i % 3 == 0 ? Difficulty::kHard : Difficulty::kSimple, 1,
                                clf.source().size(), cfg, derive_seed(seed, i));
    batch.push_back(s.back());
  }
  return batch;
}

TEST(IncrementalClassifier, FullPipelineGradientMatchesFiniteDifferences) {
  auto enc = std::make_shared<ToyImageEncoder>();
  HashTextEncoder text(16);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    IncrementalClassifier clf(enc, 10);
    EpisodeHyperparams hp;
    hp.seed = seed;
    clf.begin_episode(phrase_entries({"a", "b", "c"}, text), hp);
    clf.train_episode({}, {});  // finalize episode 1 untouched
    clf.begin_episode(phrase_entries({"d", "e"}, text), hp);
    const auto batch = random_batch(clf, 100 + seed, 6);
    auto f = [&](std::span<const double> p, Vector* g) {
      return clf.batch_loss(p, batch, 0.07, 1e-12, g);
    };
    const double err = gradient_check(f, clf.active_parameters(), 1e-5);
    EXPECT_LT(err, 1e-4) << "seed " << seed;
  }
}

TEST(IncrementalClassifier, ZeroEpochsLeavesParametersUnchanged) {
  auto enc = std::make_shared<ToyImageEncoder>();
  HashTextEncoder text(16);
  IncrementalClassifier clf(enc, 10);
  EpisodeHyperparams hp;
  hp.epochs = 0;
  clf.begin_episode(phrase_entries({"a", "b"}, text), hp);
  const Vector before = clf.active_parameters();
  const auto data = gaussian_clusters(2, 10, 1);
  const TrainReport r = clf.train_episode(data.train, {});
  EXPECT_TRUE(r.epochs.empty());
  EXPECT_FALSE(r.train_accuracy.has_value());
  EXPECT_EQ(clf.episode_parameter_bytes(0),
            std::string(reinterpret_cast<const char*>(before.data()), before.size() * sizeof(double)));
}

TEST(IncrementalClassifier, BeatsNearestCentroidOracleOnGaussianClusters) {
  auto enc = std::make_shared<ToyImageEncoder>();
  HashTextEncoder text(16);
  const auto data = gaussian_clusters(4, 200, 2024);
  const double oracle = nearest_centroid_accuracy(*enc, data.train, data.train, 4);

  IncrementalClassifier clf(enc, 10);
  EpisodeHyperparams hp;
  hp.seed = 3;
  hp.holdout_fraction = 0.0;
  clf.begin_episode(phrase_entries({"w", "x", "y", "z"}, text), hp);
  const TrainReport r = clf.train_episode(data.train, {});
  ASSERT_TRUE(r.train_accuracy.has_value());
  EXPECT_GE(*r.train_accuracy, oracle - 0.02) << "oracle " << oracle;
  ASSERT_EQ(r.epochs.size(), 20u);
  EXPECT_LT(r.epochs.back().mean_loss, r.epochs.front().mean_loss);
}

TEST(IncrementalClassifier, DeterministicReport) {
  auto enc = std::make_shared<ToyImageEncoder>();
  HashTextEncoder text(16);
  const auto data = gaussian_clusters(3, 30, 5);
  auto run = [&] {
    IncrementalClassifier clf(enc, 10);
    EpisodeHyperparams hp;
    hp.epochs = 3;
    hp.seed = 11;
    clf.begin_episode(phrase_entries({"p", "q", "r"}, text), hp);
    return nlohmann::json(clf.train_episode(data.train, {})).dump();
  };
  EXPECT_EQ(run(), run());
}

TEST(IncrementalClassifier, FrozenEpisodeUntouchedByLaterTraining) {
  auto enc = std::make_shared<ToyImageEncoder>();
  HashTextEncoder text(16);
  const auto first = gaussian_clusters(2, 20, 7);
  const auto second = gaussian_clusters(2, 20, 8, 0.6, 2);

  IncrementalClassifier clf(enc, 10);
  EpisodeHyperparams hp;
  hp.epochs = 2;
  clf.begin_episode(phrase_entries({"a", "b"}, text), hp);
  clf.train_episode(first.train, {});
  const Digest before = sha256(clf.episode_parameter_bytes(0));
  Vector scores_before;
  for (const auto& img : first.test) scores_before.push_back(clf.class_scores(img.image)[0]);

  clf.begin_episode(phrase_entries({"c", "d"}, text), hp);
  clf.train_episode(second.train, {});
  EXPECT_EQ(sha256(clf.episode_parameter_bytes(0)), before);
  for (std::size_t i = 0; i < first.test.size(); ++i) {
    EXPECT_NEAR(clf.class_scores(first.test[i].image)[0], scores_before[i], 1e-9);
  }
  EXPECT_EQ(clf.episodes()[1].frozen_fingerprint, clf.parameter_fingerprint(1));
}

TEST(IncrementalClassifier, RejectsForeignClassesAndNonFiniteInputs) {
  auto enc = std::make_shared<ToyImageEncoder>();
  HashTextEncoder text(16);
  IncrementalClassifier clf(enc, 10);
  EpisodeHyperparams hp;
  hp.epochs = 1;
  clf.begin_episode(phrase_entries({"a", "b"}, text), hp);
  LabeledImage bad;
  bad.image = Vector(16, std::nan(""));
  bad.class_index = 0;
  try {
    clf.train_episode({bad}, {});
    FAIL() << "expected NumericsError";
  } catch (const NumericsError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos);
  }

  IncrementalClassifier clf2(enc, 10);
  clf2.begin_episode(phrase_entries({"a"}, text), hp);
  LabeledImage one;
  one.image = Vector(16, 1.0);
  EXPECT_THROW(clf2.train_episode({one}, {}), InputError);  // Q = 1
  EXPECT_THROW(clf2.begin_episode(phrase_entries({"z"}, text), hp), StateError);
}

TEST(IncrementalClassifier, DuplicateLabelsConflict) {
  auto enc = std::make_shared<ToyImageEncoder>();
  HashTextEncoder text(16);
  IncrementalClassifier clf(enc, 10);
  EpisodeHyperparams hp;
  hp.epochs = 0;
  clf.begin_episode(phrase_entries({"a", "b"}, text), hp);
  clf.train_episode({}, {});
  EXPECT_THROW(clf.begin_episode(phrase_entries({"b"}, text), hp), ConflictError);
}

// One-hot targets: resampled crops put a per-epoch noise floor under the loss.
TEST(IncrementalClassifier, EpochLossNonIncreasingAcrossSeeds) {
  auto enc = std::make_shared<ToyImageEncoder>();
  HashTextEncoder text(16);
  int monotone = 0;
  const int runs = 20;
  for (int seed = 0; seed < runs; ++seed) {
    const auto data = gaussian_clusters(4, 200, 1000 + seed, 0.4);
    IncrementalClassifier clf(enc, 10);
    EpisodeHyperparams hp;
    hp.seed = seed;
    hp.holdout_fraction = 0.0;
    clf.begin_episode(phrase_entries({"a", "b", "c", "d"}, text), hp);
    TrainOptions opts;
    opts.crop.n_crops = 0;
    const auto r = clf.train_episode(data.train, opts);
    bool ok = true;
    for (std::size_t e = 1; e < r.epochs.size(); ++e) ok &= r.epochs[e].mean_loss <= r.epochs[e - 1].mean_loss;
    monotone += ok;
  }
  EXPECT_GE(monotone, 19) << monotone << " of " << runs << " runs had non-increasing epoch loss";
}

}  // namespace
}  // namespace owclip
