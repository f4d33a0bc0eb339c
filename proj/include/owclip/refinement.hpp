#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "owclip/error.hpp"
#include "owclip/text_encoder.hpp"
#include "owclip/vector_ops.hpp"

namespace owclip {

struct PoolItem {
  std::string proposal_id;
  Vector embedding;  // base-backend embedding, no episode prompts
};

struct SimilarityRecord {
  std::string proposal_id;
  double score = 0.0;
  double relative_score = 0.0;
};

inline void to_json(nlohmann::json& j, const SimilarityRecord& r) {
  j = {{"proposal_id", r.proposal_id}, {"score", r.score}, {"relative_score", r.relative_score}};
}

// Relative scores divide by the pool maximum. Non-positive scores map to 0;
// when no score is positive the maxima get 1 and everything else 0.
inline void assign_relative_scores(std::vector<SimilarityRecord>& records) {
  if (records.empty()) return;
  double top = records.front().score;
  for (const auto& r : records) top = std::max(top, r.score);
  for (auto& r : records) {
    if (r.score == top) {
      r.relative_score = 1.0;
    } else if (top > 0.0) {
      r.relative_score = std::max(r.score, 0.0) / top;
    } else {
      r.relative_score = 0.0;
    }
  }
}

inline std::vector<SimilarityRecord> score_pool(const std::vector<PoolItem>& pool, const Vector& label_embedding) {
  if (pool.empty()) throw InputError("cannot score an empty pool");
  std::vector<SimilarityRecord> out;
  out.reserve(pool.size());
  for (const auto& item : pool) {
    out.push_back({item.proposal_id, cosine_similarity(item.embedding, label_embedding), 0.0});
  }
  assign_relative_scores(out);
  return out;
}

inline std::vector<SimilarityRecord> score_pool(const std::vector<PoolItem>& pool, const std::string& label,
                                                const TextEncoder& text) {
  return score_pool(pool, text.encode(label));
}

struct ScoreRange {
  double lo = 0.0;
  double hi = 0.0;

  void validate() const {
    if (!(lo <= hi)) throw RangeError("range lower bound exceeds upper bound");
  }
  bool contains(double s) const { return lo <= s && s <= hi; }
};

struct ThresholdRanges {
  ScoreRange simple;
  ScoreRange hard;

  void validate() const {
    simple.validate();
    hard.validate();
  }
};

inline void to_json(nlohmann::json& j, const ThresholdRanges& t) {
  j = {{"ls", t.simple.lo}, {"hs", t.simple.hi}, {"lh", t.hard.lo}, {"hh", t.hard.hi}};
}

inline void from_json(const nlohmann::json& j, ThresholdRanges& t) {
  t.simple = {j.at("ls").get<double>(), j.at("hs").get<double>()};
  t.hard = {j.at("lh").get<double>(), j.at("hh").get<double>()};
}

// Ids with lo <= score <= hi, by descending score; equal scores keep pool order.
inline std::vector<std::string> filter_candidates(const std::vector<SimilarityRecord>& records, ScoreRange range) {
  range.validate();
  std::vector<const SimilarityRecord*> hits;
  for (const auto& r : records) {
    if (range.contains(r.score)) hits.push_back(&r);
  }
  std::stable_sort(hits.begin(), hits.end(),
                   [](const SimilarityRecord* a, const SimilarityRecord* b) { return a->score > b->score; });
  std::vector<std::string> out;
  out.reserve(hits.size());
  for (const auto* r : hits) out.push_back(r->proposal_id);
  return out;
}

// Linear-interpolation quantile of the scores, q in [0, 1].
inline double score_quantile(const std::vector<SimilarityRecord>& records, double q) {
  if (records.empty()) throw InputError("quantile of an empty pool");
  std::vector<double> s;
  s.reserve(records.size());
  for (const auto& r : records) s.push_back(r.score);
  std::sort(s.begin(), s.end());
  const double pos = q * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, s.size() - 1);
  return s[lo] + (pos - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

// Simple [q75, max], Hard [q25, q50].
inline ThresholdRanges default_ranges(const std::vector<SimilarityRecord>& records) {
  ThresholdRanges t;
  t.simple = {score_quantile(records, 0.75), score_quantile(records, 1.0)};
  t.hard = {score_quantile(records, 0.25), score_quantile(records, 0.5)};
  return t;
}

enum class AnnotationMode { kDelete, kReserve };

inline AnnotationMode parse_annotation_mode(const std::string& s) {
  if (s == "delete") return AnnotationMode::kDelete;
  if (s == "reserve") return AnnotationMode::kReserve;
  throw InputError("annotation mode must be 'delete' or 'reserve', got '" + s + "'");
}

inline std::string to_string(AnnotationMode m) { return m == AnnotationMode::kDelete ? "delete" : "reserve"; }

// Delete keeps the candidates the user did not pick; Reserve keeps only the picks.
// Output preserves candidate order.
inline std::vector<std::string> apply_annotation(const std::vector<std::string>& candidates,
                                                 const std::vector<std::string>& selection, AnnotationMode mode) {
  const std::unordered_set<std::string> cand(candidates.begin(), candidates.end());
  const std::unordered_set<std::string> sel(selection.begin(), selection.end());
  for (const auto& id : sel) {
    if (!cand.count(id)) throw InputError("selected id '" + id + "' is not a candidate");
  }
  std::vector<std::string> out;
  for (const auto& id : candidates) {
    if ((mode == AnnotationMode::kDelete) != static_cast<bool>(sel.count(id))) out.push_back(id);
  }
  return out;
}

struct DensityCurve {
  double bandwidth = 0.0;
  std::vector<double> x;
  std::vector<double> y;
};

inline void to_json(nlohmann::json& j, const DensityCurve& c) {
  j = {{"bandwidth", c.bandwidth}, {"x", c.x}, {"y", c.y}};
}

// Silverman's rule: 0.9 * min(sd, IQR / 1.34) * n^(-1/5).
inline double silverman_bandwidth(const std::vector<double>& v) {
  const auto n = static_cast<double>(v.size());
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / (n - 1.0));
  std::vector<SimilarityRecord> tmp;
  for (double x : v) tmp.push_back({"", x, 0.0});
  const double iqr = score_quantile(tmp, 0.75) - score_quantile(tmp, 0.25);
  double spread = sd;
  if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
  return 0.9 * spread * std::pow(n, -0.2);
}

inline double kde_at(const std::vector<double>& scores, double bw, double x) {
  double s = 0.0;
  for (double v : scores) {
    const double z = (x - v) / bw;
    s += std::exp(-0.5 * z * z);
  }
  return s / (static_cast<double>(scores.size()) * bw * std::sqrt(2.0 * M_PI));
}

constexpr std::size_t kDensityGridPoints = 256;
constexpr double kFallbackBandwidth = 0.01;

// Gaussian KDE on a 256-point grid over [min - 3bw, max + 3bw]. Without an
// explicit bandwidth Silverman's rule is used, falling back to 0.01 when the
// scores have no spread.
inline DensityCurve density_curve(const std::vector<double>& scores, std::optional<double> bandwidth = {}) {
  if (scores.empty()) throw InputError("density curve needs at least one score");
  double bw = 0.0;
  if (bandwidth) {
    if (!(*bandwidth > 0.0) || !std::isfinite(*bandwidth)) throw ConfigError("bandwidth must be positive");
    bw = *bandwidth;
  } else {
    bw = silverman_bandwidth(scores);
    if (!(bw > 0.0)) bw = kFallbackBandwidth;
  }
  const auto [mn, mx] = std::minmax_element(scores.begin(), scores.end());
  const double lo = *mn - 3.0 * bw, hi = *mx + 3.0 * bw;
  DensityCurve c;
  c.bandwidth = bw;
  c.x.resize(kDensityGridPoints);
  c.y.assign(kDensityGridPoints, 0.0);
  for (std::size_t i = 0; i < kDensityGridPoints; ++i) {
    // Mirror the grid from both ends so it is exactly symmetric.
    const double t = static_cast<double>(i) / static_cast<double>(kDensityGridPoints - 1);
    c.x[i] = i < kDensityGridPoints / 2 ? lo + t * (hi - lo) : hi - (1.0 - t) * (hi - lo);
    c.y[i] = kde_at(scores, bw, c.x[i]);
  }
  return c;
}

inline DensityCurve density_curve(const std::vector<SimilarityRecord>& records, std::optional<double> bandwidth = {}) {
  std::vector<double> s;
  s.reserve(records.size());
  for (const auto& r : records) s.push_back(r.score);
  return density_curve(s, bandwidth);
}

inline double trapezoid(const std::vector<double>& x, const std::vector<double>& y) {
  double s = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) s += 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
  return s;
}

}  // namespace owclip
