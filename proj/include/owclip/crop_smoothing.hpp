#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "owclip/error.hpp"
#include "owclip/rng.hpp"
#include "owclip/vector_ops.hpp"

namespace owclip {

struct CropSmoothingConfig {
  double epsilon_min = 0.3;
  double epsilon_max = 1.0;
  double d_hard = 0.7;
  std::size_t n_crops = 3;
  double p_min = 1e-12;
  // Scale of the background descriptor blended into a crop.
  double background_scale = 1.0;

  void validate() const {
    if (!(epsilon_min > 0.0 && epsilon_min < 1.0)) throw ConfigError("epsilon_min must be in (0, 1)");
    if (!(epsilon_max > epsilon_min && epsilon_max <= 1.0)) {
      throw ConfigError("epsilon_max must be in (epsilon_min, 1]");
    }
    if (!(d_hard > 0.0 && d_hard < 1.0)) throw ConfigError("d_hard must be in (0, 1)");
    if (!(p_min > 0.0 && p_min < 1.0)) throw ConfigError("p_min must be in (0, 1)");
    if (!(background_scale >= 0.0)) throw ConfigError("background_scale must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const CropSmoothingConfig& c) {
  j = {{"epsilon_min", c.epsilon_min}, {"epsilon_max", c.epsilon_max}, {"d_hard", c.d_hard},
       {"n_crops", c.n_crops},         {"p_min", c.p_min},             {"background_scale", c.background_scale}};
}

inline void from_json(const nlohmann::json& j, CropSmoothingConfig& c) {
  c.epsilon_min = j.value("epsilon_min", c.epsilon_min);
  c.epsilon_max = j.value("epsilon_max", c.epsilon_max);
  c.d_hard = j.value("d_hard", c.d_hard);
  c.n_crops = j.value("n_crops", c.n_crops);
  c.p_min = j.value("p_min", c.p_min);
  c.background_scale = j.value("background_scale", c.background_scale);
}

// A crop keeps `epsilon` of the image area with the aspect ratio preserved,
// so its side is sqrt(epsilon) of the unit image and the anchor (x0, y0) is
// the top-left corner in normalized coordinates.
struct CropSpec {
  double epsilon = 1.0;
  double x0 = 0.0;
  double y0 = 0.0;

  double side() const { return std::sqrt(epsilon); }
};

// epsilon ~ U(epsilon_min, epsilon_max]; anchor uniform over positions that
// keep the crop inside the image.
inline CropSpec sample_crop(std::uint64_t seed, double epsilon_min, double epsilon_max) {
  if (!(epsilon_min > 0.0 && epsilon_min <= epsilon_max && epsilon_max <= 1.0)) {
    throw ConfigError("crop bounds must satisfy 0 < epsilon_min <= epsilon_max <= 1");
  }
  Rng rng(seed);
  CropSpec c;
  c.epsilon = epsilon_max - (epsilon_max - epsilon_min) * rng.uniform();
  const double slack = 1.0 - c.side();
  c.x0 = slack > 0.0 ? slack * rng.uniform() : 0.0;
  c.y0 = slack > 0.0 ? slack * rng.uniform() : 0.0;
  return c;
}

// Descriptor-space crop model: the retained fraction of the object signal is
// epsilon and the rest is background noise drawn from (seed, anchor).
inline Vector blend_crop(std::span<const double> image, const CropSpec& crop, std::uint64_t seed,
                         double background_scale) {
  const auto ax = static_cast<std::uint64_t>(std::llround(crop.x0 * 1e6));
  const auto ay = static_cast<std::uint64_t>(std::llround(crop.y0 * 1e6));
  Rng rng(derive_seed(seed, ax, ay));
  Vector out(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    out[i] = crop.epsilon * image[i] + (1.0 - crop.epsilon) * rng.normal(0.0, background_scale);
  }
  return out;
}

struct SmoothTarget {
  std::size_t q = 0;
  std::size_t gt_index = 0;
  double gt_mass = 1.0;
  double other_mass = 0.0;
  double d_factor = 1.0;
  double epsilon = 1.0;

  double mass(std::size_t i) const { return i == gt_index ? gt_mass : other_mass; }

  Vector dense() const {
    Vector v(q, other_mass);
    v[gt_index] = gt_mass;
    return v;
  }
};

// Ground truth gets D*epsilon; the remaining 1 - D*epsilon is split evenly
// over the other Q-1 labels.
inline SmoothTarget build_target(std::size_t q, double d, double epsilon, std::size_t gt_index,
                                 double epsilon_min) {
  if (q < 2) throw InputError("Q must be at least 2");
  if (gt_index >= q) throw InputError("gt_index out of range");
  if (!(d > 0.0 && d <= 1.0)) throw InputError("D must be in (0, 1]");
  if (!(epsilon <= 1.0)) throw InputError("epsilon must be <= 1");
  if (!(epsilon > epsilon_min)) {
    throw GuardError("epsilon " + std::to_string(epsilon) + " is not above epsilon_min " +
                     std::to_string(epsilon_min));
  }
  const double gt = d * epsilon;
  if (gt > 1.0) throw InputError("D*epsilon exceeds 1");
  SmoothTarget t;
  t.q = q;
  t.gt_index = gt_index;
  t.gt_mass = gt;
  t.other_mass = (1.0 - gt) / static_cast<double>(q - 1);
  t.d_factor = d;
  t.epsilon = epsilon;
  return t;
}

inline void check_probs(const SmoothTarget& target, std::span<const double> probs) {
  if (probs.size() != target.q) {
    throw DimensionError("target has Q=" + std::to_string(target.q) + " but got " +
                         std::to_string(probs.size()) + " probabilities");
  }
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw InputError("probabilities must be non-negative");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw InputError("probabilities must sum to 1");
}

// -[D eps log y_j + sum_{i != j} (1 - D eps)/(Q-1) log y_i], with y clipped
// below at p_min.
inline double crop_smoothing_loss(const SmoothTarget& target, std::span<const double> probs,
                                  double p_min = 1e-12) {
  check_probs(target, probs);
  double loss = 0.0;
  for (std::size_t i = 0; i < target.q; ++i) {
    const double m = target.mass(i);
    if (m != 0.0) loss -= m * std::log(std::max(probs[i], p_min));
  }
  return loss;
}

struct LossGrad {
  double loss = 0.0;
  Vector probs;
  Vector grad_logits;
};

// Same loss evaluated from logits through a log-softmax, with its gradient.
// Terms whose probability is clipped at p_min contribute no gradient.
inline LossGrad crop_smoothing_loss_from_logits(const SmoothTarget& target,
                                                std::span<const double> logits,
                                                double p_min = 1e-12) {
  if (logits.size() != target.q) throw DimensionError("logit count does not match Q");
  double mx = logits[0];
  for (double z : logits) mx = std::max(mx, z);
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  const double lse = mx + std::log(sum);
  const double log_pmin = std::log(p_min);

  LossGrad out;
  out.probs.resize(target.q);
  out.grad_logits.assign(target.q, 0.0);
  double unclipped_mass = 0.0;
  for (std::size_t i = 0; i < target.q; ++i) {
    const double logp = logits[i] - lse;
    out.probs[i] = std::exp(logp);
    const double m = target.mass(i);
    if (logp > log_pmin) {
      out.loss -= m * logp;
      unclipped_mass += m;
      out.grad_logits[i] -= m;
    } else {
      out.loss -= m * log_pmin;
    }
  }
  for (std::size_t i = 0; i < target.q; ++i) out.grad_logits[i] += out.probs[i] * unclipped_mass;
  return out;
}

enum class Difficulty { kSimple, kHard };

inline std::string to_string(Difficulty d) { return d == Difficulty::kSimple ? "simple" : "hard"; }

// One training input: the (possibly cropped) image descriptor fed to the
// image encoder together with its smoothed target.
struct TrainSample {
  Vector image;
  std::size_t class_index = 0;
  double epsilon = 1.0;
  Difficulty difficulty = Difficulty::kSimple;
  SmoothTarget target;
  std::optional<CropSpec> crop;
};

inline void to_json(nlohmann::json& j, const TrainSample& s) {
  j = {{"class_index", s.class_index},
       {"epsilon", s.epsilon},
       {"difficulty", to_string(s.difficulty)},
       {"q", s.target.q},
       {"gt_mass", s.target.gt_mass},
       {"other_mass", s.target.other_mass},
       {"d", s.target.d_factor}};
  if (s.crop) j["crop"] = {{"epsilon", s.crop->epsilon}, {"x0", s.crop->x0}, {"y0", s.crop->y0}};
}

// Dual-path sample construction. Simple images yield the uncropped original
// (epsilon 1, D 1) plus n_crops random crops with D 1; Hard images are used
// as-is with epsilon 1 and D = d_hard. With `one_hot` set (no Crop-Smoothing)
// every image gives a single one-hot sample.
inline std::vector<TrainSample> make_train_samples(std::span<const double> image,
                                                   std::size_t class_index, Difficulty difficulty,
                                                   std::size_t n_crops, std::size_t q,
                                                   const CropSmoothingConfig& cfg,
                                                   std::uint64_t seed, bool one_hot = false) {
  std::vector<TrainSample> out;
  auto push = [&](Vector img, double eps, double d, std::optional<CropSpec> crop) {
    TrainSample s;
    s.image = std::move(img);
    s.class_index = class_index;
    s.epsilon = eps;
    s.difficulty = difficulty;
    s.target = build_target(q, d, eps, class_index, cfg.epsilon_min);
    s.crop = crop;
    out.push_back(std::move(s));
  };
  const Vector original(image.begin(), image.end());
  if (one_hot) {
    push(original, 1.0, 1.0, std::nullopt);
    return out;
  }
  if (difficulty == Difficulty::kHard) {
    push(original, 1.0, cfg.d_hard, std::nullopt);
    return out;
  }
  push(original, 1.0, 1.0, std::nullopt);
  for (std::size_t i = 0; i < n_crops; ++i) {
    const std::uint64_t crop_seed = derive_seed(seed, i);
    const CropSpec crop = sample_crop(crop_seed, cfg.epsilon_min, cfg.epsilon_max);
    push(blend_crop(image, crop, crop_seed, cfg.background_scale), crop.epsilon, 1.0, crop);
  }
  return out;
}

// Targets invert (gt_mass < other_mass) exactly when D*epsilon < 1/Q. Lists
// every configured path where that can happen for the given Q, or for any
// Q >= 2 when Q is not known yet.
inline std::vector<std::string> target_inversion_warnings(const CropSmoothingConfig& cfg,
                                                          std::optional<std::size_t> q = {}) {
  std::vector<std::string> warnings;
  auto check = [&](const char* path, double lowest_mass) {
    const double limit = q ? 1.0 / static_cast<double>(*q) : 0.5;
    if (lowest_mass < limit) {
      const auto q_safe = static_cast<std::size_t>(std::ceil(1.0 / lowest_mass));
      warnings.push_back(std::string(path) + " targets can invert (ground-truth mass " +
                         std::to_string(lowest_mass) + " below 1/Q) for Q < " +
                         std::to_string(q_safe) + (q ? " (current Q=" + std::to_string(*q) + ")" : ""));
    }
  };
  check("simple-crop", cfg.epsilon_min);
  check("hard", cfg.d_hard);
  return warnings;
}

}  // namespace owclip
