#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "owclip/error.hpp"

namespace owclip {

constexpr double kDefaultIouThreshold = 0.5;

// Pixel box with x1 < x2 and y1 < y2.
struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x1 < x2 &&
           y1 < y2;
  }
  double area() const { return (x2 - x1) * (y2 - y1); }
};

inline void to_json(nlohmann::json& j, const Box& b) { j = nlohmann::json::array({b.x1, b.y1, b.x2, b.y2}); }

inline void from_json(const nlohmann::json& j, Box& b) {
  if (!j.is_array() || j.size() != 4) throw InputError("box must be an array [x1, y1, x2, y2]");
  b = {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

struct Detection {
  std::string image;
  std::string label;
  double confidence = 0.0;
  Box box;
};

struct GroundTruth {
  std::string image;
  std::string label;
  Box box;
};

struct MatchResult {
  std::vector<bool> true_positive;  // per detection, in ranked order
  std::vector<std::size_t> order;   // ranked detection indices
  std::size_t n_gt = 0;
};

// Ranks detections by confidence (stable on ties) and matches each to the
// unmatched ground truth of the same image with the highest IoU, if that IoU
// reaches the threshold. Ties between ground truths go to the lower index.
// Labels are not checked; callers pass one class at a time.
inline MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                    double iou_threshold = kDefaultIouThreshold) {
  MatchResult m;
  m.n_gt = gts.size();
  m.order.resize(dets.size());
  std::iota(m.order.begin(), m.order.end(), 0);
  std::stable_sort(m.order.begin(), m.order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });
  std::vector<bool> used(gts.size(), false);
  m.true_positive.reserve(dets.size());
  for (auto di : m.order) {
    const auto& d = dets[di];
    std::optional<std::size_t> best;
    double best_iou = iou_threshold;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].image != d.image) continue;
      const double v = iou(d.box, gts[g].box);
      if (v >= best_iou && (!best || v > best_iou)) {
        best = g;
        best_iou = v;
      }
    }
    if (best) used[*best] = true;
    m.true_positive.push_back(best.has_value());
  }
  return m;
}

// All-point interpolated AP: area under the precision envelope
// p_interp(r) = max precision at any recall >= r. Undefined without ground truth.
inline std::optional<double> average_precision(const std::vector<Detection>& dets,
                                               const std::vector<GroundTruth>& gts,
                                               double iou_threshold = kDefaultIouThreshold) {
  if (gts.empty()) return std::nullopt;
  const auto m = match_detections(dets, gts, iou_threshold);
  const std::size_t n = m.true_positive.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += m.true_positive[i];
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(m.n_gt);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

enum class ClassGroup { kPrevious, kCurrent };

struct GroupAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::optional<double> value() const {
    if (total == 0) return std::nullopt;
    return static_cast<double>(correct) / static_cast<double>(total);
  }
};

struct EvalResult {
  std::map<std::string, double> per_class_ap;
  std::map<std::string, std::size_t> gt_counts;
  std::vector<std::string> previous_classes;
  std::vector<std::string> current_classes;
  std::optional<double> map_previous_known;
  std::optional<double> map_current_known;
  std::optional<double> map_both;
  // Top-1 classification accuracy of eval proposals whose gt label is a
  // known class, independent of the routing threshold.
  GroupAccuracy accuracy_previous;
  GroupAccuracy accuracy_current;
  // Share of eval proposals with a gt label outside the known classes that
  // were routed unknown.
  std::optional<double> unknown_recall;
  std::vector<std::string> warnings;
};

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json();
}

inline void to_json(nlohmann::json& j, const EvalResult& r) {
  GroupAccuracy both{r.accuracy_previous.correct + r.accuracy_current.correct,
                     r.accuracy_previous.total + r.accuracy_current.total};
  j = {{"per_class_ap", r.per_class_ap},
       {"gt_counts", r.gt_counts},
       {"previous_classes", r.previous_classes},
       {"current_classes", r.current_classes},
       {"map_previous_known", optional_json(r.map_previous_known)},
       {"map_current_known", optional_json(r.map_current_known)},
       {"map_both", optional_json(r.map_both)},
       {"accuracy_previous_known", optional_json(r.accuracy_previous.value())},
       {"accuracy_current_known", optional_json(r.accuracy_current.value())},
       {"accuracy_both", optional_json(both.value())},
       {"unknown_recall", optional_json(r.unknown_recall)},
       {"warnings", r.warnings}};
}

inline std::optional<double> mean_ap(const std::map<std::string, double>& ap, const std::vector<std::string>& labels) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& l : labels) {
    if (auto it = ap.find(l); it != ap.end()) {
      sum += it->second;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

// Per-class AP over the known classes and the previous/current/both means.
// Classes without ground truth are left out of every mean with a warning.
inline EvalResult evaluate_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                      const std::vector<std::pair<std::string, ClassGroup>>& classes,
                                      double iou_threshold = kDefaultIouThreshold) {
  EvalResult r;
  std::vector<std::string> all;
  for (const auto& [label, group] : classes) {
    (group == ClassGroup::kPrevious ? r.previous_classes : r.current_classes).push_back(label);
    all.push_back(label);
    std::vector<Detection> d;
    std::vector<GroundTruth> g;
    for (const auto& x : dets) {
      if (x.label == label) d.push_back(x);
    }
    for (const auto& x : gts) {
      if (x.label == label) g.push_back(x);
    }
    r.gt_counts[label] = g.size();
    if (auto ap = average_precision(d, g, iou_threshold)) {
      r.per_class_ap[label] = *ap;
    } else {
      r.warnings.push_back("class '" + label + "' has no ground truth; AP undefined and excluded from means");
    }
  }
  r.map_previous_known = mean_ap(r.per_class_ap, r.previous_classes);
  r.map_current_known = mean_ap(r.per_class_ap, r.current_classes);
  r.map_both = mean_ap(r.per_class_ap, all);
  return r;
}

}  // namespace owclip
