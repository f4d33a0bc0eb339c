#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "owclip/crop_smoothing.hpp"
#include "owclip/error.hpp"
#include "owclip/hash.hpp"
#include "owclip/image_encoder.hpp"
#include "owclip/prompt_block.hpp"
#include "owclip/rng.hpp"
#include "owclip/text_encoder.hpp"
#include "owclip/vector_ops.hpp"

namespace owclip {

struct ClassEntry {
  std::string label;
  Vector context;
  std::vector<std::string> phrases;
  int episode_id = 0;
};

// Context vector = normalize(mean of the phrase embeddings).
inline ClassEntry init_class_entry(std::string label, std::vector<std::string> phrases,
                                   const TextEncoder& text, int episode_id = 0) {
  if (label.empty()) throw InputError("class label must not be empty");
  if (phrases.empty()) throw InputError("class '" + label + "' needs at least one phrase");
  std::vector<Vector> embs;
  embs.reserve(phrases.size());
  for (const auto& p : phrases) embs.push_back(text.encode(p));
  ClassEntry e;
  e.label = std::move(label);
  e.context = l2_normalized(mean_of(embs));
  e.phrases = std::move(phrases);
  e.episode_id = episode_id;
  return e;
}

// Phrase set used when no feature phrases are available.
inline std::vector<std::string> label_only_phrases(const std::string& label) {
  return {"a photo of " + label};
}

class ClassFeatureSource {
 public:
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<ClassEntry>& entries() const { return entries_; }
  const ClassEntry& at(std::size_t i) const { return entries_.at(i); }
  ClassEntry& at(std::size_t i) { return entries_.at(i); }

  std::optional<std::size_t> index_of(const std::string& label) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].label == label) return i;
    }
    return std::nullopt;
  }

  std::size_t add(ClassEntry e) {
    if (index_of(e.label)) throw ConflictError("duplicate class label '" + e.label + "'");
    if (!entries_.empty() && e.context.size() != entries_.front().context.size()) {
      throw DimensionError("context vector dim does not match the source");
    }
    entries_.push_back(std::move(e));
    return entries_.size() - 1;
  }

 private:
  std::vector<ClassEntry> entries_;
};

struct LogitsRow {
  Vector scores;
  Vector probs;
};

inline Vector softmax_scaled(std::span<const double> scores, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  Vector p(scores.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (double s : scores) mx = std::max(mx, s / temperature);
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    p[i] = std::exp(scores[i] / temperature - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

inline LogitsRow make_logits_row(Vector scores, double temperature) {
  LogitsRow row;
  row.probs = softmax_scaled(scores, temperature);
  row.scores = std::move(scores);
  return row;
}

// Lowest index wins ties.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

// Cosine of one embedding against every context vector, softmax at temperature.
inline LogitsRow classify(std::span<const double> embedding, const ClassFeatureSource& source,
                          double temperature) {
  if (source.empty()) throw StateError("class feature source is empty");
  Vector scores(source.size());
  for (std::size_t k = 0; k < source.size(); ++k) {
    scores[k] = cosine_similarity(embedding, source.at(k).context);
  }
  return make_logits_row(std::move(scores), temperature);
}

struct ClassDecision {
  bool known = false;
  std::optional<std::size_t> class_index;
  std::string label;
  double confidence = 0.0;
};

// Known iff the top softmax probability reaches t.
inline ClassDecision route_proposal(const LogitsRow& row, const ClassFeatureSource& source,
                                    double t_threshold) {
  if (!(t_threshold > 0.0 && t_threshold < 1.0)) throw ConfigError("threshold t must be in (0, 1)");
  ClassDecision d;
  if (row.probs.empty()) return d;
  const std::size_t k = argmax(row.probs);
  d.confidence = row.probs[k];
  if (d.confidence >= t_threshold) {
    d.known = true;
    d.class_index = k;
    d.label = source.at(k).label;
  }
  return d;
}

inline ClassDecision route_proposal(std::span<const double> embedding,
                                    const ClassFeatureSource& source, double temperature,
                                    double t_threshold) {
  if (source.empty()) {
    if (!(t_threshold > 0.0 && t_threshold < 1.0)) throw ConfigError("threshold t must be in (0, 1)");
    return {};
  }
  return route_proposal(classify(embedding, source, temperature), source, t_threshold);
}

struct EpisodeHyperparams {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 0.02;
  double temperature = 0.07;
  std::uint64_t seed = 0;
  double holdout_fraction = 0.1;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) {
      throw ConfigError("holdout_fraction must be in [0, 1)");
    }
  }
};

inline void to_json(nlohmann::json& j, const EpisodeHyperparams& h) {
  j = {{"epochs", h.epochs},           {"batch_size", h.batch_size}, {"learning_rate", h.learning_rate},
       {"temperature", h.temperature}, {"seed", h.seed},             {"holdout_fraction", h.holdout_fraction}};
}

inline void from_json(const nlohmann::json& j, EpisodeHyperparams& h) {
  h.epochs = j.value("epochs", h.epochs);
  h.batch_size = j.value("batch_size", h.batch_size);
  h.learning_rate = j.value("learning_rate", h.learning_rate);
  h.temperature = j.value("temperature", h.temperature);
  h.seed = j.value("seed", h.seed);
  h.holdout_fraction = j.value("holdout_fraction", h.holdout_fraction);
}

struct Episode {
  int id = 0;
  std::vector<std::size_t> class_indices;
  PromptBlock prompts;
  EpisodeHyperparams hyperparams;
  Digest frozen_fingerprint{};
  bool finalized = false;
};

struct LabeledImage {
  Vector image;
  std::size_t class_index = 0;
  Difficulty difficulty = Difficulty::kSimple;
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::size_t samples = 0;
};

struct TrainReport {
  int episode_id = 0;
  std::vector<EpochStats> epochs;
  std::size_t train_images = 0;
  std::size_t holdout_images = 0;
  std::optional<double> train_accuracy;
  std::optional<double> holdout_accuracy;
  std::vector<std::string> warnings;
};

inline void to_json(nlohmann::json& j, const TrainReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"samples", e.samples}});
  }
  j = {{"episode_id", r.episode_id},
       {"epochs", epochs},
       {"train_images", r.train_images},
       {"holdout_images", r.holdout_images},
       {"train_accuracy", r.train_accuracy ? nlohmann::json(*r.train_accuracy) : nlohmann::json()},
       {"holdout_accuracy", r.holdout_accuracy ? nlohmann::json(*r.holdout_accuracy) : nlohmann::json()},
       {"warnings", r.warnings}};
}

struct TrainOptions {
  CropSmoothingConfig crop;
  // Plain one-hot targets without crops.
  bool one_hot = false;
  std::function<void(const EpochStats&)> on_epoch;
};

// Central finite differences against an analytic gradient. `loss_fn` returns
// the loss at `params` and, when `grad` is non-null, writes the analytic
// gradient. The relative error of a component is |a - n| / max(|a|, |n|, floor).
inline double gradient_check(
    const std::function<double(std::span<const double>, Vector*)>& loss_fn, Vector params,
    double h = 1e-5, double floor = 1e-7) {
  Vector analytic;
  loss_fn(params, &analytic);
  if (analytic.size() != params.size()) throw DimensionError("gradient size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = params[i];
    params[i] = orig + h;
    const double up = loss_fn(params, nullptr);
    params[i] = orig - h;
    const double down = loss_fn(params, nullptr);
    params[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

// Class Feature Source plus the per-episode prompt blocks. Classes of episode t
// are scored against the image embedding computed with episode t's prompts,
// so adding an episode never changes the scores of earlier classes.
class IncrementalClassifier {
 public:
  explicit IncrementalClassifier(std::shared_ptr<const ImageEncoder> encoder,
                                 std::size_t prompt_length = 10)
      : encoder_(std::move(encoder)), prompt_length_(prompt_length) {
    if (!encoder_) throw ConfigError("image encoder required");
    if (encoder_->prompt_layers() == 0) prompt_length_ = 0;
  }

  const ImageEncoder& encoder() const { return *encoder_; }
  std::shared_ptr<const ImageEncoder> encoder_ptr() const { return encoder_; }
  const ClassFeatureSource& source() const { return source_; }
  const std::vector<Episode>& episodes() const { return episodes_; }
  std::size_t prompt_length() const { return prompt_length_; }

  bool has_active_episode() const { return !episodes_.empty() && !episodes_.back().finalized; }

  std::size_t episode_of_class(std::size_t k) const { return class_episode_.at(k); }

  std::vector<Vector> episode_embeddings(std::span<const double> image) const {
    std::vector<Vector> out;
    out.reserve(episodes_.size());
    std::optional<Vector> base;
    for (const auto& ep : episodes_) {
      if (ep.prompts.length == 0) {
        if (!base) base = encoder_->encode(image);
        out.push_back(*base);
      } else {
        out.push_back(encoder_->encode(image, ep.prompts));
      }
    }
    return out;
  }

  Vector class_scores(std::span<const double> image) const {
    if (source_.empty()) throw StateError("class feature source is empty");
    const auto embs = episode_embeddings(image);
    Vector s(source_.size());
    for (std::size_t k = 0; k < source_.size(); ++k) {
      s[k] = cosine_similarity(embs[class_episode_[k]], source_.at(k).context);
    }
    return s;
  }

  LogitsRow classify_image(std::span<const double> image, double temperature) const {
    return make_logits_row(class_scores(image), temperature);
  }

  // Opens a new episode owning `entries`. Everything that exists already is
  // frozen from here on; its fingerprint is recorded now.
  Episode& begin_episode(std::vector<ClassEntry> entries, EpisodeHyperparams hp) {
    if (has_active_episode()) throw StateError("an episode is already active");
    if (entries.empty()) throw InputError("an episode needs at least one class");
    hp.validate();
    for (const auto& e : entries) {
      if (source_.index_of(e.label)) throw ConflictError("duplicate class label '" + e.label + "'");
      if (e.context.size() != encoder_->output_dim()) {
        throw DimensionError("context vector dim does not match the image embedding dim");
      }
    }
    Episode ep;
    ep.id = episodes_.empty() ? 1 : episodes_.back().id + 1;
    ep.hyperparams = hp;
    ep.frozen_fingerprint = parameter_fingerprint(episodes_.size());
    ep.prompts = PromptBlock::random(ep.id, encoder_->prompt_layers(), prompt_length_,
                                     encoder_->prompt_width(), derive_seed(hp.seed, 0x9a0b, ep.id));
    for (auto& e : entries) {
      e.episode_id = ep.id;
      normalize_in_place(e.context);
      ep.class_indices.push_back(source_.add(std::move(e)));
      class_episode_.push_back(episodes_.size());
    }
    episodes_.push_back(std::move(ep));
    return episodes_.back();
  }

  // Re-creates a finalized episode from stored parameters.
  void restore_episode(Episode ep, std::vector<ClassEntry> entries) {
    if (has_active_episode()) throw StateError("cannot restore while an episode is active");
    if (ep.frozen_fingerprint != parameter_fingerprint(episodes_.size())) {
      throw FormatError("episode " + std::to_string(ep.id) +
                        " fingerprint does not match the restored prior parameters");
    }
    ep.prompts.require_shape(encoder_->prompt_layers(), encoder_->prompt_width());
    ep.class_indices.clear();
    for (auto& e : entries) {
      e.episode_id = ep.id;
      ep.class_indices.push_back(source_.add(std::move(e)));
      class_episode_.push_back(episodes_.size());
    }
    ep.finalized = true;
    episodes_.push_back(std::move(ep));
  }

  // SHA-256 over the frozen encoder weights and the parameters of the first
  // `n_episodes` episodes (prompt tokens, then their context vectors).
  Digest parameter_fingerprint(std::size_t n_episodes) const {
    Sha256 h;
    h.update(encoder_->weight_bytes());
    for (std::size_t t = 0; t < n_episodes && t < episodes_.size(); ++t) {
      h.update(episode_parameter_bytes(t));
    }
    return h.finish();
  }

  std::string episode_parameter_bytes(std::size_t t) const {
    const auto& ep = episodes_.at(t);
    std::string out;
    auto append = [&out](std::span<const double> v) {
      out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
    };
    append(ep.prompts.tokens);
    for (auto k : ep.class_indices) append(source_.at(k).context);
    return out;
  }

  // Active parameters flattened as [prompt tokens..., context of each active class...].
  Vector active_parameters() const {
    const auto& ep = active();
    Vector p(ep.prompts.tokens);
    for (auto k : ep.class_indices) {
      const auto& c = source_.at(k).context;
      p.insert(p.end(), c.begin(), c.end());
    }
    return p;
  }

  void set_active_parameters(std::span<const double> p) {
    auto& ep = active();
    if (p.size() != active_parameter_count()) throw DimensionError("active parameter size mismatch");
    std::copy_n(p.begin(), ep.prompts.tokens.size(), ep.prompts.tokens.begin());
    std::size_t off = ep.prompts.tokens.size();
    for (auto k : ep.class_indices) {
      auto& c = source_.at(k).context;
      std::copy_n(p.begin() + static_cast<std::ptrdiff_t>(off), c.size(), c.begin());
      off += c.size();
    }
  }

  std::size_t active_parameter_count() const {
    const auto& ep = active();
    return ep.prompts.tokens.size() + ep.class_indices.size() * encoder_->output_dim();
  }

  // Mean Crop-Smoothing loss over `batch` at the given active parameters.
  // Gradients are taken with respect to the active parameters only; frozen
  // episodes are evaluated forward-only.
  double batch_loss(std::span<const double> params, const std::vector<TrainSample>& batch,
                    double temperature, double p_min, Vector* grad,
                    std::vector<Vector>* probs_out = nullptr) const {
    const auto& ep = active();
    const std::size_t active_idx = episodes_.size() - 1;
    if (params.size() != active_parameter_count()) throw DimensionError("active parameter size mismatch");
    if (batch.empty()) throw InputError("empty batch");
    const std::size_t q = source_.size();
    const std::size_t d = encoder_->output_dim();

    PromptBlock prompts = ep.prompts;
    std::copy_n(params.begin(), prompts.tokens.size(), prompts.tokens.begin());
    // Context vector of class k: active ones come from params.
    std::vector<std::span<const double>> ctx(q);
    for (std::size_t k = 0; k < q; ++k) ctx[k] = source_.at(k).context;
    std::unordered_map<std::size_t, std::size_t> active_offset;
    {
      std::size_t off = prompts.tokens.size();
      for (auto k : ep.class_indices) {
        ctx[k] = params.subspan(off, d);
        active_offset[k] = off;
        off += d;
      }
    }

    PromptBlock prompt_grad(ep.id, prompts.layers, prompts.length, prompts.d_model);
    if (grad) grad->assign(params.size(), 0.0);
    if (probs_out) probs_out->clear();
    double total = 0.0;
    Vector scores(q), grad_e(d);
    for (const auto& s : batch) {
      if (s.target.q != q) throw DimensionError("sample target Q does not match the source size");
      std::unique_ptr<EncoderTrace> trace;
      const Vector e_active = encoder_->forward(s.image, prompts, trace);
      std::vector<std::optional<Vector>> frozen(episodes_.size());
      for (std::size_t k = 0; k < q; ++k) {
        const std::size_t t = class_episode_[k];
        const Vector* e = &e_active;
        if (t != active_idx) {
          if (!frozen[t]) {
            frozen[t] = episodes_[t].prompts.length == 0 && prompts.length == 0
                            ? e_active
                            : encoder_->encode(s.image, episodes_[t].prompts);
          }
          e = &*frozen[t];
        }
        scores[k] = raw_cosine(*e, ctx[k]);
      }
      Vector logits(q);
      for (std::size_t k = 0; k < q; ++k) logits[k] = scores[k] / temperature;
      const LossGrad lg = crop_smoothing_loss_from_logits(s.target, logits, p_min);
      total += lg.loss;
      if (probs_out) probs_out->push_back(lg.probs);
      if (!grad) continue;

      std::fill(grad_e.begin(), grad_e.end(), 0.0);
      for (auto k : ep.class_indices) {
        const double ds = lg.grad_logits[k] / temperature;
        if (ds == 0.0) continue;
        const auto c = ctx[k];
        const double cn = l2_norm(c);
        const double en = l2_norm(e_active);
        const double sk = scores[k];
        double* gc = grad->data() + active_offset[k];
        for (std::size_t j = 0; j < d; ++j) {
          // d cos(e, c) / dc = (e/|e| - cos * c/|c|) / |c|, and symmetrically for e.
          gc[j] += ds * (e_active[j] / en - sk * c[j] / cn) / cn;
          grad_e[j] += ds * (c[j] / cn - sk * e_active[j] / en) / en;
        }
      }
      if (prompts.length > 0 && trace) encoder_->backward(*trace, grad_e, prompt_grad);
    }
    const double n = static_cast<double>(batch.size());
    if (grad) {
      for (std::size_t i = 0; i < prompt_grad.tokens.size(); ++i) (*grad)[i] += prompt_grad.tokens[i];
      for (double& g : *grad) g /= n;
    }
    return total / n;
  }

  TrainReport train_episode(const std::vector<LabeledImage>& images, const TrainOptions& opts = {}) {
    auto& ep = active();
    const auto& hp = ep.hyperparams;
    hp.validate();
    opts.crop.validate();
    const std::size_t q = source_.size();
    if (q < 2) throw InputError("training needs at least 2 classes in the source");
    for (const auto& img : images) {
      if (img.class_index >= q) throw InputError("image references an unknown class");
      if (std::find(ep.class_indices.begin(), ep.class_indices.end(), img.class_index) ==
          ep.class_indices.end()) {
        throw InputError("training images must belong to the active episode's classes");
      }
    }

    TrainReport report;
    report.episode_id = ep.id;
    report.warnings = target_inversion_warnings(opts.crop, q);

    // Seeded hold-out split over source images.
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    Rng split_rng(derive_seed(hp.seed, 0x401d, ep.id));
    split_rng.shuffle(order.begin(), order.end());
    const auto n_holdout = static_cast<std::size_t>(
        std::floor(hp.holdout_fraction * static_cast<double>(images.size())));
    std::vector<std::size_t> holdout(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_holdout));
    std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_holdout), order.end());
    std::sort(train.begin(), train.end());
    std::sort(holdout.begin(), holdout.end());
    report.train_images = train.size();
    report.holdout_images = holdout.size();

    Vector params = active_parameters();
    const std::size_t d = encoder_->output_dim();
    const std::size_t n_prompt = ep.prompts.tokens.size();
    Vector grad;
    for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
      std::vector<TrainSample> samples;
      for (auto i : train) {
        auto part = make_train_samples(images[i].image, images[i].class_index, images[i].difficulty,
                                       opts.crop.n_crops, q, opts.crop,
                                       derive_seed(hp.seed, 0xc409, ep.id, epoch, i), opts.one_hot);
        for (auto& s : part) samples.push_back(std::move(s));
      }
      Rng shuffle_rng(derive_seed(hp.seed, 0x5bf1, ep.id, epoch));
      shuffle_rng.shuffle(samples.begin(), samples.end());

      double loss_sum = 0.0;
      std::size_t batch_no = 0;
      for (std::size_t start = 0; start < samples.size(); start += hp.batch_size, ++batch_no) {
        const std::size_t end = std::min(samples.size(), start + hp.batch_size);
        const std::vector<TrainSample> batch(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                             samples.begin() + static_cast<std::ptrdiff_t>(end));
        const std::string where = " at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no);
        double loss = 0.0;
        try {
          loss = batch_loss(params, batch, hp.temperature, opts.crop.p_min, &grad);
        } catch (const NumericsError& e) {
          throw NumericsError(e.what() + where);
        }
        if (!std::isfinite(loss) || !all_finite(grad)) throw NumericsError("non-finite loss or gradient" + where);
        loss_sum += loss * static_cast<double>(batch.size());
        for (std::size_t i = 0; i < params.size(); ++i) params[i] -= hp.learning_rate * grad[i];
        for (std::size_t off = n_prompt; off < params.size(); off += d) {
          normalize_in_place(std::span<double>(params.data() + off, d));
        }
      }
      EpochStats st{epoch, samples.empty() ? 0.0 : loss_sum / static_cast<double>(samples.size()),
                    samples.size()};
      report.epochs.push_back(st);
      if (opts.on_epoch) opts.on_epoch(st);
    }
    set_active_parameters(params);

    if (hp.epochs > 0) {
      auto accuracy = [&](const std::vector<std::size_t>& idx) -> std::optional<double> {
        if (idx.empty()) return std::nullopt;
        std::size_t hit = 0;
        for (auto i : idx) hit += argmax(class_scores(images[i].image)) == images[i].class_index;
        return static_cast<double>(hit) / static_cast<double>(idx.size());
      };
      report.train_accuracy = accuracy(train);
      report.holdout_accuracy = accuracy(holdout);
    }
    finalize_episode();
    return report;
  }

  // Verifies the freeze contract and closes the active episode.
  void finalize_episode() {
    auto& ep = active();
    if (parameter_fingerprint(episodes_.size() - 1) != ep.frozen_fingerprint) {
      throw StateError("frozen parameters changed during episode " + std::to_string(ep.id));
    }
    ep.finalized = true;
  }

 private:
  static double raw_cosine(std::span<const double> a, std::span<const double> b) {
    return dot(a, b) / (l2_norm(a) * l2_norm(b));
  }

  Episode& active() {
    if (!has_active_episode()) throw StateError("no active episode");
    return episodes_.back();
  }
  const Episode& active() const {
    if (!has_active_episode()) throw StateError("no active episode");
    return episodes_.back();
  }

  std::shared_ptr<const ImageEncoder> encoder_;
  std::size_t prompt_length_;
  ClassFeatureSource source_;
  std::vector<Episode> episodes_;
  std::vector<std::size_t> class_episode_;  // class index -> episode position
};

}  // namespace owclip
