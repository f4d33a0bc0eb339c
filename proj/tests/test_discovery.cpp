#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "owclip/discovery.hpp"
#include "oracles.hpp"

namespace owclip {
namespace {

using oracle::gaussian_blobs;

TEST(KMeans, SingleClusterIsTheMean) {
  const std::vector<Vector> pts = {{0, 0}, {2, 0}, {4, 6}};
  const auto m = kmeans(pts, 1, 3);
  EXPECT_EQ(m.centroids[0], (Vector{2.0, 2.0}));
  EXPECT_EQ(m.assignments, (std::vector<std::size_t>{0, 0, 0}));
  EXPECT_NEAR(m.sse, 8 + 4 + 20, 1e-12);
}

TEST(KMeans, TwoSeparatedPairsGivePairMeans) {
  const std::vector<Vector> pts = {{0, 0}, {1, 0}, {100, 100}, {100, 103}};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto m = kmeans(pts, 2, seed);
    std::set<Vector> got(m.centroids.begin(), m.centroids.end());
    EXPECT_EQ(got, (std::set<Vector>{{0.5, 0.0}, {100.0, 101.5}}));
  }
}

TEST(KMeans, DeterministicAndErrors) {
  const auto pts = gaussian_blobs(3, 20, 4, 5.0, 1.0, 1);
  const auto a = kmeans(pts, 3, 9), b = kmeans(pts, 3, 9);
  EXPECT_EQ(a.centroids, b.centroids);
  EXPECT_EQ(a.assignments, b.assignments);
  EXPECT_EQ(a.sse_history, b.sse_history);
  EXPECT_THROW(kmeans(pts, 61, 1), InputError);
  EXPECT_THROW(kmeans(pts, 2, 1, 0), InputError);
}

TEST(KMeans, SseNonIncreasingAndFixedPoint) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto pts = gaussian_blobs(5, 30, 8, 2.0, 1.0, 100 + seed);
    const auto m = kmeans(pts, 2 + seed % 7, seed);
    for (std::size_t i = 1; i < m.sse_history.size(); ++i) ASSERT_LE(m.sse_history[i], m.sse_history[i - 1]);
    ASSERT_LT(m.iterations, 100u);
    // Reassigning against the final centroids changes nothing, and every
    // non-empty centroid is the mean of its members.
    for (std::size_t i = 0; i < pts.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t c = 0; c < m.k; ++c) {
        const double d = squared_distance(pts[i], m.centroids[c]);
        if (d < best) best = d, arg = c;
      }
      ASSERT_EQ(arg, m.assignments[i]);
    }
    ASSERT_NEAR(m.sse, cluster_sse(pts, m.centroids, m.assignments), 1e-9 * m.sse);
  }
}

TEST(SelectK, LinearCurveTiesToSmallestK) {
  EXPECT_EQ(elbow_from_curve({1, 2, 3, 4, 5}, {50, 40, 30, 20, 10}), 2u);
  EXPECT_EQ(elbow_from_curve({1, 2, 3, 4, 5}, {100, 20, 15, 12, 10}), 2u);
  EXPECT_THROW(elbow_from_curve({1, 2}, {1, 0}), InputError);
}

TEST(SelectK, RecoversGaussianCountAndCurveIsMonotone) {
  int hits = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto pts = gaussian_blobs(4, 25, 16, 3.0, 1.0, 700 + seed);
    const auto s = select_k(pts, 2, 7, seed);
    ASSERT_EQ(s.ks.front(), 1u);
    ASSERT_EQ(s.ks.back(), 8u);
    for (std::size_t i = 1; i < s.sse.size(); ++i) ASSERT_LE(s.sse[i], s.sse[i - 1]);
    hits += s.k_star == 4;
  }
  EXPECT_GE(hits, 18);
}

TEST(SelectK, RangeErrors) {
  const auto pts = gaussian_blobs(2, 3, 2, 5.0, 1.0, 1);
  EXPECT_THROW(select_k(pts, 1, 3, 0), InputError);
  EXPECT_THROW(select_k(pts, 3, 2, 0), InputError);
  EXPECT_THROW(select_k(pts, 2, 6, 0), InputError);
  EXPECT_NO_THROW(select_k(pts, 2, 5, 0));
}

TEST(Projection, PcaPreservesDistancesOfPlanarData) {
  Rng rng(5);
  Vector u(6), v(6);
  for (double& x : u) x = rng.normal();
  for (double& x : v) x = rng.normal();
  normalize_in_place(u);
  const double uv = dot(u, v);
  for (std::size_t i = 0; i < 6; ++i) v[i] -= uv * u[i];
  normalize_in_place(v);
  std::vector<Vector> pts;
  for (int i = 0; i < 40; ++i) {
    const double a = rng.normal(0, 3), b = rng.normal(0, 1);
    Vector p(6);
    for (std::size_t j = 0; j < 6; ++j) p[j] = 1.0 + a * u[j] + b * v[j];
    pts.push_back(p);
  }
  const auto y = pca_2d(pts);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const double d_hi = std::sqrt(squared_distance(pts[i], pts[j]));
      const double d_lo = std::hypot(y[i][0] - y[j][0], y[i][1] - y[j][1]);
      ASSERT_NEAR(d_hi, d_lo, 1e-9);
    }
  }
}

TEST(Projection, TsneDeterministicAndSeparatesClusters) {
  std::vector<std::size_t> labels;
  const auto pts = gaussian_blobs(3, 20, 10, 4.0, 0.3, 17, &labels);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < pts.size(); ++i) ids.push_back(std::to_string(i));
  const auto a = project_2d(ids, pts, ProjectionMethod::kTsne, 42);
  const auto b = project_2d(ids, pts, ProjectionMethod::kTsne, 42);
  EXPECT_EQ(a.points, b.points);

  double intra = 0, inter = 0;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const double d = std::hypot(a.points[i][0] - a.points[j][0], a.points[i][1] - a.points[j][1]);
      if (labels[i] == labels[j]) {
        intra += d, ++n_intra;
      } else {
        inter += d, ++n_inter;
      }
    }
  }
  EXPECT_GT(inter / n_inter, 3.0 * intra / n_intra);
  EXPECT_THROW(project_2d({"a"}, {{1.0}}, ProjectionMethod::kTsne, 0), InputError);
}

TEST(Projection, TsneReportsProgressAndCancels) {
  const auto pts = gaussian_blobs(2, 5, 3, 4.0, 0.3, 2);
  std::size_t calls = 0;
  TsneOptions opt;
  opt.iterations = 50;
  opt.progress = [&](std::size_t it, std::size_t total) {
    ++calls;
    EXPECT_EQ(total, 50u);
    return it < 10;
  };
  EXPECT_THROW(tsne_2d(pts, 1, opt), StateError);
  EXPECT_EQ(calls, 10u);
}

Projection2D proj_of(std::vector<Point2> pts) {
  Projection2D p;
  for (std::size_t i = 0; i < pts.size(); ++i) p.ids.push_back("p" + std::to_string(i));
  p.points = std::move(pts);
  return p;
}

TEST(Lasso, HandExamples) {
  const auto p = proj_of({{0.2, 0.2}, {0.9, 0.9}, {-1, 0}, {0.5, 0.0}, {0.0, 0.0}});
  const std::vector<Point2> tri = {{0, 0}, {1, 0}, {0, 1}};
  EXPECT_EQ(lasso_select(p, tri), (std::vector<std::string>{"p0", "p3", "p4"}));
  EXPECT_EQ(lasso_select(p, {{-10, -10}, {10, -10}, {10, 10}, {-10, 10}}).size(), 5u);
  const auto only = proj_of({{0.25, 0.25}, {0.8, 0.8}});
  EXPECT_EQ(lasso_select(only, tri), (std::vector<std::string>{"p0"}));
  EXPECT_EQ(lasso_select(proj_of({{0.5, 0.5}}), tri).size(), 1u);  // on the hypotenuse
  EXPECT_THROW(lasso_select(p, {{0, 0}, {1, 1}}), InputError);
}

TEST(Lasso, MatchesConvexPolygonOracle) {
  Rng rng(61);
  for (int trial = 0; trial < 200; ++trial) {
    // Convex polygon: sorted angles on a circle. Inside iff on the left of
    // (or on) every counter-clockwise edge.
    const std::size_t n = 3 + rng.index(8);
    std::vector<double> ang(n);
    for (double& a : ang) a = rng.uniform(0, 2 * M_PI);
    std::sort(ang.begin(), ang.end());
    std::vector<Point2> poly;
    for (double a : ang) poly.push_back({std::cos(a), std::sin(a)});
    std::vector<Point2> pts(300);
    for (auto& q : pts) q = {rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2)};
    const auto got = lasso_select(proj_of(pts), poly);
    std::vector<std::string> want;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      bool in = true;
      for (std::size_t e = 0; e < n; ++e) {
        const auto& a = poly[e];
        const auto& b = poly[(e + 1) % n];
        in &= (b[0] - a[0]) * (pts[i][1] - a[1]) - (b[1] - a[1]) * (pts[i][0] - a[0]) >= 0;
      }
      if (in) want.push_back("p" + std::to_string(i));
    }
    ASSERT_EQ(got, want);
  }
}

std::vector<PoolItem> random_pool(std::size_t n, std::size_t dim, Rng& rng) {
  std::vector<PoolItem> pool;
  for (std::size_t i = 0; i < n; ++i) {
    Vector v(dim);
    for (double& x : v) x = rng.normal();
    pool.push_back({"r" + std::to_string(i), v});
  }
  return pool;
}

TEST(RelatedImages, SmallCases) {
  Rng rng(2);
  auto pool = random_pool(2, 4, rng);
  EXPECT_EQ(related_images("r0", pool, 10).size(), 1u);
  EXPECT_EQ(related_images("r0", pool, 1)[0].proposal_id, "r1");
  pool = random_pool(7, 4, rng);
  EXPECT_EQ(related_images("r3", pool, 100).size(), 6u);
  EXPECT_THROW(related_images("nope", pool), InputError);
  EXPECT_THROW(related_images("r0", pool, 0), InputError);
}

TEST(RelatedImages, MatchesExhaustiveSort) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    auto pool = random_pool(50, 8, rng);
    if (trial % 4 == 0) pool[7].embedding = pool[9].embedding;  // exact tie
    const std::size_t q = rng.index(50);
    const auto got = related_images(pool[q].proposal_id, pool, 5);
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (i == q) continue;
      const double c = dot(pool[q].embedding, pool[i].embedding) /
                       (l2_norm(pool[q].embedding) * l2_norm(pool[i].embedding));
      all.push_back({-c, i});
    }
    std::sort(all.begin(), all.end());
    ASSERT_EQ(got.size(), 5u);
    for (std::size_t r = 0; r < 5; ++r) {
      ASSERT_EQ(got[r].proposal_id, pool[all[r].second].proposal_id);
    }
  }
}

}  // namespace
}  // namespace owclip
