#pragma once

// Brute-force reference implementations shared by the unit tests and the
// acceptance runner. They avoid the library's helpers on purpose.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "owclip/discovery.hpp"
#include "owclip/evaluation.hpp"
#include "owclip/refinement.hpp"
#include "owclip/rng.hpp"

namespace owclip::oracle {

// Intersection by explicit coordinates.
inline double iou(const Box& a, const Box& b) {
  const double left = a.x1 > b.x1 ? a.x1 : b.x1;
  const double right = a.x2 < b.x2 ? a.x2 : b.x2;
  const double top = a.y1 > b.y1 ? a.y1 : b.y1;
  const double bottom = a.y2 < b.y2 ? a.y2 : b.y2;
  if (!(right > left && bottom > top)) return 0.0;
  const double inter = (right - left) * (bottom - top);
  const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return inter / uni;
}

// Matching by scanning gts in index order, AP as the mean over k = 1..n_gt of
// the best precision at any cutoff whose recall reaches k / n_gt.
inline double average_precision(std::vector<Detection> dets, const std::vector<GroundTruth>& gts) {
  // Insertion sort keeps ties in input order.
  for (std::size_t i = 1; i < dets.size(); ++i) {
    for (std::size_t j = i; j > 0 && dets[j].confidence > dets[j - 1].confidence; --j) std::swap(dets[j], dets[j - 1]);
  }
  std::vector<int> used(gts.size(), 0);
  std::vector<int> tp;
  for (const auto& d : dets) {
    int best = -1;
    double best_v = 0.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].image != d.image) continue;
      const double v = oracle::iou(d.box, gts[g].box);
      if (v < 0.5) continue;
      if (best < 0 || v > best_v) {
        best = static_cast<int>(g);
        best_v = v;
      }
    }
    if (best >= 0) used[static_cast<std::size_t>(best)] = 1;
    tp.push_back(best >= 0);
  }
  double total = 0.0;
  for (std::size_t k = 1; k <= gts.size(); ++k) {
    double best_p = 0.0;
    int hits = 0;
    for (std::size_t i = 0; i < tp.size(); ++i) {
      hits += tp[i];
      if (static_cast<std::size_t>(hits) >= k) best_p = std::max(best_p, static_cast<double>(hits) / (i + 1.0));
    }
    total += best_p;
  }
  return total / static_cast<double>(gts.size());
}

// Scores in [lo, hi], ordered by (score desc, pool index asc).
inline std::vector<std::string> filter(const std::vector<SimilarityRecord>& records, double lo, double hi) {
  std::vector<std::pair<double, std::size_t>> keep;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].score >= lo && records[i].score <= hi) keep.push_back({-records[i].score, i});
  }
  std::sort(keep.begin(), keep.end());
  std::vector<std::string> out;
  for (const auto& [_, i] : keep) out.push_back(records[i].proposal_id);
  return out;
}

inline double cosine(const Vector& a, const Vector& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

// Every other pool item by (cosine desc, pool index asc), first k.
inline std::vector<std::pair<std::string, double>> related(const std::vector<PoolItem>& pool, std::size_t q,
                                                           std::size_t k) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (i != q) all.push_back({-cosine(pool[q].embedding, pool[i].embedding), i});
  }
  std::sort(all.begin(), all.end());
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t r = 0; r < std::min(k, all.size()); ++r) out.push_back({pool[all[r].second].proposal_id, -all[r].first});
  return out;
}

// Winding number; points exactly on an edge are not expected.
inline bool inside(const Point2& p, const std::vector<Point2>& poly) {
  int wn = 0;
  for (std::size_t e = 0; e < poly.size(); ++e) {
    const auto& a = poly[e];
    const auto& b = poly[(e + 1) % poly.size()];
    const double side = (b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1]);
    if (a[1] <= p[1]) {
      if (b[1] > p[1] && side > 0) ++wn;
    } else if (b[1] <= p[1] && side < 0) {
      --wn;
    }
  }
  return wn != 0;
}

// Star-shaped polygon around the origin: sorted angles, random radii.
inline std::vector<Point2> random_star_polygon(Rng& rng, std::size_t n) {
  std::vector<double> ang(n);
  for (double& a : ang) a = rng.uniform(0, 2 * M_PI);
  std::sort(ang.begin(), ang.end());
  std::vector<Point2> poly;
  for (double a : ang) {
    const double r = rng.uniform(0.2, 1.0);
    poly.push_back({r * std::cos(a), r * std::sin(a)});
  }
  return poly;
}

inline std::vector<Vector> gaussian_blobs(std::size_t g, std::size_t per, std::size_t dim, double sep, double sd,
                                          std::uint64_t seed, std::vector<std::size_t>* labels = nullptr) {
  Rng rng(seed);
  std::vector<Vector> centers(g, Vector(dim));
  for (auto& c : centers) {
    for (double& v : c) v = rng.normal(0.0, sep);
  }
  std::vector<Vector> pts;
  for (std::size_t k = 0; k < g; ++k) {
    for (std::size_t i = 0; i < per; ++i) {
      Vector p = centers[k];
      for (double& v : p) v += rng.normal(0.0, sd);
      pts.push_back(p);
      if (labels) labels->push_back(k);
    }
  }
  return pts;
}

}  // namespace owclip::oracle
