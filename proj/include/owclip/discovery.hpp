#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "owclip/error.hpp"
#include "owclip/refinement.hpp"
#include "owclip/rng.hpp"
#include "owclip/vector_ops.hpp"

namespace owclip {

struct ClusterModel {
  std::size_t k = 0;
  std::vector<Vector> centroids;
  std::vector<std::size_t> assignments;
  double sse = 0.0;
  std::vector<double> sse_history;  // SSE after each assignment step
  std::size_t iterations = 0;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  require_same_dim(a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

namespace detail {

inline void require_points(const std::vector<Vector>& points) {
  if (points.empty()) throw InputError("no points");
  for (const auto& p : points) {
    require_same_dim(p, points.front());
    if (!all_finite(p)) throw InputError("non-finite embedding");
  }
}

// Nearest centroid; ties go to the lower index.
inline std::size_t nearest(const Vector& p, const std::vector<Vector>& centroids, double* dist = nullptr) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = squared_distance(p, centroids[c]);
    if (d < best_d) best_d = d, best = c;
  }
  if (dist) *dist = best_d;
  return best;
}

// D^2 sampling of one new seed point given the current centroids.
inline Vector dsq_pick(const std::vector<Vector>& points, const std::vector<Vector>& centroids, Rng& rng) {
  if (centroids.empty()) return points[rng.index(points.size())];
  std::vector<double> d2(points.size());
  double total = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    nearest(points[i], centroids, &d2[i]);
    total += d2[i];
  }
  if (!(total > 0.0)) return points[rng.index(points.size())];
  double r = rng.uniform() * total;
  for (std::size_t i = 0; i < points.size(); ++i) {
    r -= d2[i];
    if (r < 0.0) return points[i];
  }
  for (std::size_t i = points.size(); i-- > 0;) {
    if (d2[i] > 0.0) return points[i];
  }
  return points.back();
}

inline ClusterModel lloyd(const std::vector<Vector>& points, std::vector<Vector> centroids, std::size_t max_iter) {
  ClusterModel m;
  m.k = centroids.size();
  const std::size_t d = points.front().size();
  std::vector<std::size_t> assign(points.size(), 0);
  for (std::size_t it = 0; it < max_iter; ++it) {
    double sse = 0.0;
    bool changed = it == 0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      double dist = 0.0;
      const std::size_t c = nearest(points[i], centroids, &dist);
      if (c != assign[i]) changed = true;
      assign[i] = c;
      sse += dist;
    }
    m.sse_history.push_back(sse);
    m.iterations = it + 1;
    if (!changed) break;
    std::vector<Vector> sums(m.k, Vector(d, 0.0));
    std::vector<std::size_t> counts(m.k, 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
      ++counts[assign[i]];
      for (std::size_t j = 0; j < d; ++j) sums[assign[i]][j] += points[i][j];
    }
    for (std::size_t c = 0; c < m.k; ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its centroid
      for (std::size_t j = 0; j < d; ++j) centroids[c][j] = sums[c][j] / static_cast<double>(counts[c]);
    }
  }
  m.centroids = std::move(centroids);
  m.assignments = std::move(assign);
  m.sse = m.sse_history.back();
  return m;
}

}  // namespace detail

inline double cluster_sse(const std::vector<Vector>& points, const std::vector<Vector>& centroids,
                          const std::vector<std::size_t>& assignments) {
  double s = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) s += squared_distance(points[i], centroids[assignments[i]]);
  return s;
}

// k-means++ seeding followed by Lloyd iterations.
inline ClusterModel kmeans(const std::vector<Vector>& points, std::size_t k, std::uint64_t seed,
                           std::size_t max_iter = 100) {
  detail::require_points(points);
  if (k == 0 || k > points.size()) throw InputError("k must be in [1, number of points]");
  if (max_iter == 0) throw InputError("max_iter must be at least 1");
  Rng rng(seed);
  std::vector<Vector> centroids;
  while (centroids.size() < k) centroids.push_back(detail::dsq_pick(points, centroids, rng));
  return detail::lloyd(points, std::move(centroids), max_iter);
}

struct KSelection {
  std::size_t k_star = 0;
  std::vector<std::size_t> ks;
  std::vector<double> sse;
};

inline void to_json(nlohmann::json& j, const KSelection& s) {
  j = {{"k_star", s.k_star}, {"ks", s.ks}, {"sse", s.sse}};
}

// Elbow at the largest second difference sse[i-1] - 2 sse[i] + sse[i+1] over
// interior points; ties go to the smaller k.
inline std::size_t elbow_from_curve(const std::vector<std::size_t>& ks, const std::vector<double>& sse) {
  if (ks.size() != sse.size() || ks.size() < 3) throw InputError("elbow needs at least 3 curve points");
  std::size_t best = 1;
  double best_v = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i + 1 < ks.size(); ++i) {
    const double v = sse[i - 1] - 2.0 * sse[i] + sse[i + 1];
    if (v > best_v) best_v = v, best = i;
  }
  return ks[best];
}

// Evaluates k over [k_min - 1, k_max + 1] so every candidate has a second
// difference. Each k warm-starts from the k - 1 solution plus one D^2 seed and
// also tries `restarts` fresh k-means++ runs, keeping the lowest SSE; the warm
// start makes the curve non-increasing in k. The elbow is taken on log SSE so
// the large early drops do not mask the knee.
inline KSelection select_k(const std::vector<Vector>& points, std::size_t k_min, std::size_t k_max,
                           std::uint64_t seed, std::size_t restarts = 10, std::size_t max_iter = 100) {
  detail::require_points(points);
  if (k_min < 2 || k_max < k_min || k_max + 1 > points.size()) {
    throw InputError("k range must satisfy 2 <= k_min <= k_max <= points - 1");
  }
  KSelection out;
  ClusterModel prev = kmeans(points, k_min - 1, derive_seed(seed, k_min - 1), max_iter);
  for (std::size_t r = 1; r < restarts; ++r) {
    auto alt = kmeans(points, k_min - 1, derive_seed(seed, k_min - 1, r), max_iter);
    if (alt.sse < prev.sse) prev = std::move(alt);
  }
  out.ks.push_back(k_min - 1);
  out.sse.push_back(prev.sse);
  for (std::size_t k = k_min; k <= k_max + 1; ++k) {
    Rng rng(derive_seed(seed, k, 0xa11));
    auto centroids = prev.centroids;
    centroids.push_back(detail::dsq_pick(points, centroids, rng));
    ClusterModel best = detail::lloyd(points, std::move(centroids), max_iter);
    for (std::size_t r = 0; r < restarts; ++r) {
      auto alt = kmeans(points, k, derive_seed(seed, k, r), max_iter);
      if (alt.sse < best.sse) best = std::move(alt);
    }
    out.ks.push_back(k);
    out.sse.push_back(best.sse);
    prev = std::move(best);
  }
  std::vector<double> log_sse;
  const double floor = 1e-12 * std::max(out.sse.front(), 1e-300);
  for (double v : out.sse) log_sse.push_back(std::log(v + floor));
  out.k_star = elbow_from_curve(out.ks, log_sse);
  return out;
}

enum class ProjectionMethod { kTsne, kPca };

inline ProjectionMethod parse_projection_method(const std::string& s) {
  if (s == "tsne") return ProjectionMethod::kTsne;
  if (s == "pca") return ProjectionMethod::kPca;
  throw InputError("projection method must be 'tsne' or 'pca', got '" + s + "'");
}

inline std::string to_string(ProjectionMethod m) { return m == ProjectionMethod::kTsne ? "tsne" : "pca"; }

using Point2 = std::array<double, 2>;

struct Projection2D {
  ProjectionMethod method = ProjectionMethod::kTsne;
  std::uint64_t seed = 0;
  std::vector<std::string> ids;
  std::vector<Point2> points;
};

inline void to_json(nlohmann::json& j, const Projection2D& p) {
  auto pts = nlohmann::json::array();
  for (std::size_t i = 0; i < p.ids.size(); ++i) {
    pts.push_back({{"id", p.ids[i]}, {"x", p.points[i][0]}, {"y", p.points[i][1]}});
  }
  j = {{"method", to_string(p.method)}, {"seed", p.seed}, {"points", pts}};
}

inline Eigen::MatrixXd to_matrix(const std::vector<Vector>& points) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(points.size()), static_cast<Eigen::Index>(points.front().size()));
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t j = 0; j < points[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = points[i][j];
  }
  return m;
}

// Top-2 principal axes; each axis is signed so its largest-magnitude loading
// is positive.
inline std::vector<Point2> pca_2d(const std::vector<Vector>& points) {
  detail::require_points(points);
  if (points.size() < 2) throw InputError("projection needs at least 2 points");
  Eigen::MatrixXd x = to_matrix(points);
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(points.size());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::Index d = cov.rows();
  Eigen::MatrixXd axes = Eigen::MatrixXd::Zero(d, 2);
  for (Eigen::Index c = 0; c < std::min<Eigen::Index>(2, d); ++c) {
    Eigen::VectorXd v = es.eigenvectors().col(d - 1 - c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    axes.col(c) = v;
  }
  const Eigen::MatrixXd y = x * axes;
  std::vector<Point2> out(points.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {y(static_cast<Eigen::Index>(i), 0), y(static_cast<Eigen::Index>(i), 1)};
  return out;
}

struct TsneOptions {
  double perplexity = 30.0;
  std::size_t iterations = 500;
  double learning_rate = 200.0;
  std::size_t exaggeration_iters = 100;
  double exaggeration = 12.0;
  // Called as (iteration, total); returning false cancels with StateError.
  std::function<bool(std::size_t, std::size_t)> progress;
};

namespace detail {

// Row-conditional affinities with a per-point bandwidth matched to the
// perplexity by bisection on beta = 1 / (2 sigma^2).
inline Eigen::MatrixXd tsne_affinities(const Eigen::MatrixXd& d2, double perplexity) {
  const Eigen::Index n = d2.rows();
  const double target = std::log(perplexity);
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    Eigen::VectorXd row(n);
    for (int step = 0; step < 100; ++step) {
      double min_d = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j != i) min_d = std::min(min_d, d2(i, j));
      }
      double sum = 0.0, wsum = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        row(j) = j == i ? 0.0 : std::exp(-beta * (d2(i, j) - min_d));
        sum += row(j);
        wsum += row(j) * (d2(i, j) - min_d);
      }
      const double entropy = std::log(sum) + beta * wsum / sum;
      row /= sum;
      const double diff = entropy - target;
      if (std::abs(diff) < 1e-5) break;
      if (diff > 0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : (beta + hi) / 2.0;
      } else {
        hi = beta;
        beta = (beta + lo) / 2.0;
      }
    }
    p.row(i) = row.transpose();
  }
  return p;
}

}  // namespace detail

// Exact t-SNE. Perplexity is clamped to (n - 1) / 3 for small pools.
inline std::vector<Point2> tsne_2d(const std::vector<Vector>& points, std::uint64_t seed, const TsneOptions& opt = {}) {
  detail::require_points(points);
  if (points.size() < 2) throw InputError("projection needs at least 2 points");
  const auto n = static_cast<Eigen::Index>(points.size());
  const Eigen::MatrixXd x = to_matrix(points);
  const Eigen::VectorXd sq = x.rowwise().squaredNorm();
  Eigen::MatrixXd d2 = (-2.0 * x * x.transpose()).colwise() + sq;
  d2.rowwise() += sq.transpose();
  d2 = d2.cwiseMax(0.0);

  const double perplexity = std::max(1.0, std::min(opt.perplexity, static_cast<double>(n - 1) / 3.0));
  Eigen::MatrixXd p = detail::tsne_affinities(d2, perplexity);
  p = (p + p.transpose().eval()) / (2.0 * static_cast<double>(n));
  p = p.cwiseMax(1e-12);
  p.diagonal().setZero();

  Rng rng(seed);
  Eigen::MatrixXd y(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    y(i, 0) = rng.normal(0.0, 1e-4);
    y(i, 1) = rng.normal(0.0, 1e-4);
  }
  Eigen::MatrixXd update = Eigen::MatrixXd::Zero(n, 2), gains = Eigen::MatrixXd::Ones(n, 2);
  Eigen::MatrixXd num(n, n), grad(n, 2);
  for (std::size_t it = 0; it < opt.iterations; ++it) {
    const double exag = it < opt.exaggeration_iters ? opt.exaggeration : 1.0;
    const double momentum = it < opt.exaggeration_iters ? 0.5 : 0.8;
    const Eigen::VectorXd ysq = y.rowwise().squaredNorm();
    Eigen::MatrixXd yd2 = (-2.0 * y * y.transpose()).colwise() + ysq;
    yd2.rowwise() += ysq.transpose();
    num = (1.0 + yd2.cwiseMax(0.0).array()).inverse().matrix();
    num.diagonal().setZero();
    const double z = num.sum();
    const Eigen::MatrixXd w = ((exag * p).array() - num.array() / z).matrix().cwiseProduct(num);
    grad = 4.0 * (w.rowwise().sum().asDiagonal() * y - w * y);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index c = 0; c < 2; ++c) {
        const bool same = (grad(i, c) > 0) == (update(i, c) > 0);
        gains(i, c) = std::max(0.01, same ? gains(i, c) * 0.8 : gains(i, c) + 0.2);
      }
    }
    update = momentum * update - opt.learning_rate * gains.cwiseProduct(grad);
    y += update;
    y.rowwise() -= y.colwise().mean();
    if (opt.progress && !opt.progress(it + 1, opt.iterations)) throw StateError("projection cancelled");
  }
  if (!y.allFinite()) throw NumericsError("t-SNE diverged");
  std::vector<Point2> out(points.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {y(static_cast<Eigen::Index>(i), 0), y(static_cast<Eigen::Index>(i), 1)};
  return out;
}

inline Projection2D project_2d(const std::vector<std::string>& ids, const std::vector<Vector>& points,
                               ProjectionMethod method, std::uint64_t seed, const TsneOptions& opt = {}) {
  if (ids.size() != points.size()) throw InputError("ids and points differ in length");
  Projection2D out;
  out.method = method;
  out.seed = seed;
  out.ids = ids;
  out.points = method == ProjectionMethod::kPca ? pca_2d(points) : tsne_2d(points, seed, opt);
  return out;
}

// Even-odd rule; points on an edge or vertex count as inside.
inline bool point_in_polygon(const Point2& pt, const std::vector<Point2>& poly) {
  const std::size_t n = poly.size();
  bool inside = false;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const auto& a = poly[j];
    const auto& b = poly[i];
    const double cross = (b[0] - a[0]) * (pt[1] - a[1]) - (b[1] - a[1]) * (pt[0] - a[0]);
    const double scale = std::max({std::abs(b[0] - a[0]), std::abs(b[1] - a[1]), 1.0});
    if (std::abs(cross) <= 1e-12 * scale * scale && pt[0] >= std::min(a[0], b[0]) && pt[0] <= std::max(a[0], b[0]) &&
        pt[1] >= std::min(a[1], b[1]) && pt[1] <= std::max(a[1], b[1])) {
      return true;
    }
    if ((a[1] > pt[1]) != (b[1] > pt[1])) {
      const double x_cross = a[0] + (pt[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
      if (pt[0] < x_cross) inside = !inside;
    }
  }
  return inside;
}

inline std::vector<std::string> lasso_select(const Projection2D& proj, const std::vector<Point2>& polygon) {
  if (polygon.size() < 3) throw InputError("lasso polygon needs at least 3 vertices");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < proj.ids.size(); ++i) {
    if (point_in_polygon(proj.points[i], polygon)) out.push_back(proj.ids[i]);
  }
  return out;
}

struct RankedItem {
  std::string proposal_id;
  double score = 0.0;
};

constexpr std::size_t kDefaultRelatedK = 100;

// Top-k by cosine to the query, descending; equal scores keep pool order.
inline std::vector<RankedItem> related_images(const std::string& query_id, const std::vector<PoolItem>& pool,
                                              std::size_t k = kDefaultRelatedK) {
  if (k == 0) throw InputError("k must be at least 1");
  const auto q = std::find_if(pool.begin(), pool.end(), [&](const PoolItem& p) { return p.proposal_id == query_id; });
  if (q == pool.end()) throw InputError("query '" + query_id + "' is not in the pool");
  std::vector<RankedItem> all;
  for (const auto& p : pool) {
    if (&p == &*q) continue;
    all.push_back({p.proposal_id, cosine_similarity(q->embedding, p.embedding)});
  }
  std::stable_sort(all.begin(), all.end(), [](const RankedItem& a, const RankedItem& b) { return a.score > b.score; });
  if (all.size() > k) all.resize(k);
  return all;
}

}  // namespace owclip
