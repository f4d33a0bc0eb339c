#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "owclip/api.hpp"
#include "owclip/manifest.hpp"
#include "owclip/phrase_gen.hpp"
#include "owclip/rng.hpp"
#include "owclip/text_encoder.hpp"
#include "owclip/vector_ops.hpp"

namespace owclip {

inline std::vector<std::string> default_known_labels() {
  return {"airplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat"};
}

inline std::vector<std::string> default_unknown_labels() { return {"zebra", "giraffe", "traffic light", "elephant"}; }

// Gaussian classes in embedding space. Each class centroid mixes the text
// embedding of its label, the mean embedding of a few of its mock phrases
// (the "visually true" ones an annotator would tick) and a random direction,
// so similarity filtering and phrase selection carry real signal.
struct SyntheticSpec {
  std::vector<std::string> labels;
  std::size_t dim = 16;
  std::size_t train_per_class = 200;
  std::size_t eval_per_class = 50;
  double spread = 0.5;  // sample = centroid + spread * N(0, I / dim)
  double text_weight = 0.45;
  double phrase_weight = 0.35;
  std::size_t true_phrases = 3;
  std::uint64_t seed = 0;
};

struct SyntheticClass {
  std::string label;
  Vector centroid;
  std::vector<std::string> true_phrases;
};

struct SyntheticCorpus {
  std::vector<SyntheticClass> classes;
  std::vector<ManifestRow> rows;
  std::map<std::string, std::string> truth;  // proposal id -> gt label
};

inline Vector random_unit(Rng& rng, std::size_t dim) {
  Vector v(dim);
  for (double& x : v) x = rng.normal();
  normalize_in_place(v);
  return v;
}

inline SyntheticCorpus make_corpus(const SyntheticSpec& spec, const TextEncoder& text, LLMProvider& provider) {
  if (spec.labels.empty()) throw InputError("synthetic corpus needs labels");
  if (text.dim() != spec.dim) throw DimensionError("text encoder dim differs from the corpus dim");
  const double rest = 1.0 - spec.text_weight * spec.text_weight - spec.phrase_weight * spec.phrase_weight;
  if (rest < 0.0) throw ConfigError("text_weight^2 + phrase_weight^2 must not exceed 1");
  SyntheticCorpus c;
  Rng rng(derive_seed(spec.seed, 0x5e7));
  for (const auto& label : spec.labels) {
    SyntheticClass k;
    k.label = label;
    auto phrases = generate_phrases(provider, label).phrases;
    Rng pick(derive_seed(spec.seed, fnv1a64(label)));
    pick.shuffle(phrases.begin(), phrases.end());
    phrases.resize(std::min(spec.true_phrases, phrases.size()));
    k.true_phrases = phrases;
    std::vector<Vector> pe;
    for (const auto& p : phrases) pe.push_back(text.encode(p));
    const Vector t = text.encode(label);
    const Vector ph = pe.empty() ? Vector(spec.dim, 0.0) : l2_normalized(mean_of(pe));
    const Vector r = random_unit(rng, spec.dim);
    k.centroid.assign(spec.dim, 0.0);
    for (std::size_t i = 0; i < spec.dim; ++i) {
      k.centroid[i] = spec.text_weight * t[i] + spec.phrase_weight * ph[i] + std::sqrt(rest) * r[i];
    }
    normalize_in_place(k.centroid);
    c.classes.push_back(std::move(k));
  }
  const double sd = spec.spread / std::sqrt(static_cast<double>(spec.dim));
  std::size_t serial = 0;
  for (const auto split : {Split::kTrain, Split::kEval}) {
    const std::size_t per = split == Split::kTrain ? spec.train_per_class : spec.eval_per_class;
    for (std::size_t i = 0; i < per; ++i) {
      for (const auto& k : c.classes) {
        ManifestRow row;
        char id[32];
        std::snprintf(id, sizeof(id), "p%06zu", serial++);
        row.proposal_id = id;
        row.image_path = std::string("images/") + id + ".jpg";
        const double w = 40.0 + std::floor(rng.uniform() * 200.0), h = 40.0 + std::floor(rng.uniform() * 200.0);
        row.box = {0.0, 0.0, w, h};
        row.gt_label = k.label;
        row.split = split;
        Vector v(spec.dim);
        for (std::size_t d = 0; d < spec.dim; ++d) v[d] = k.centroid[d] + sd * rng.normal();
        row.descriptor = std::move(v);
        c.truth[row.proposal_id] = k.label;
        c.rows.push_back(std::move(row));
      }
    }
  }
  return c;
}

// Cosine nearest-centroid classifier fitted on the train rows of every class;
// returns accuracy on the eval rows whose label is in `labels`.
inline double nearest_centroid_accuracy(const SyntheticCorpus& c, const std::vector<std::string>& labels,
                                        const std::function<Vector(const Vector&)>& embed) {
  std::map<std::string, std::vector<Vector>> members;
  for (const auto& r : c.rows) {
    if (r.split == Split::kTrain) members[*r.gt_label].push_back(embed(*r.descriptor));
  }
  std::vector<std::pair<std::string, Vector>> centroids;
  for (const auto& k : c.classes) centroids.emplace_back(k.label, mean_of(members.at(k.label)));
  const std::set<std::string> wanted(labels.begin(), labels.end());
  std::size_t hit = 0, total = 0;
  for (const auto& r : c.rows) {
    if (r.split != Split::kEval || !wanted.count(*r.gt_label)) continue;
    const Vector e = embed(*r.descriptor);
    std::size_t best = 0;
    double best_s = -2.0;
    for (std::size_t k = 0; k < centroids.size(); ++k) {
      const double s = cosine_similarity(e, centroids[k].second);
      if (s > best_s) best_s = s, best = k;
    }
    hit += centroids[best].first == *r.gt_label;
    ++total;
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

using ApiTransport = std::function<ApiResponse(const ApiRequest&)>;

struct AnnotatorOptions {
  std::string method = "pca";
  std::uint64_t seed = 0;
  std::size_t kmin = 2;
  std::size_t kmax = 16;
  std::string ablation = "full";
  std::optional<nlohmann::json> hyperparams;
};

struct AnnotatedTask {
  std::vector<std::string> session_ids;
  std::vector<std::string> labels;
  std::vector<std::string> missed_labels;
  nlohmann::json sessions = nlohmann::json::array();
  nlohmann::json train;
  nlohmann::json eval;
};

// Plays the human: names clusters after the majority ground truth of their
// members, ticks the phrases that describe the class, deletes wrong Simple
// candidates, reserves right Hard candidates, finalizes and trains. All of it
// goes through the API.
class ScriptedAnnotator {
 public:
  ScriptedAnnotator(ApiTransport api, const SyntheticCorpus& corpus) : api_(std::move(api)), corpus_(corpus) {
    for (const auto& k : corpus.classes) true_phrases_[k.label] = k.true_phrases;
  }

  AnnotatedTask run_task(const std::vector<std::string>& labels, const AnnotatorOptions& opt) {
    AnnotatedTask task;
    const std::set<std::string> wanted(labels.begin(), labels.end());

    const auto proj = call("GET", "/projection",
                           {{"method", opt.method},
                            {"seed", std::to_string(opt.seed)},
                            {"kmin", std::to_string(opt.kmin)},
                            {"kmax", std::to_string(opt.kmax)},
                            {"wait", "1"}});
    std::map<std::size_t, std::map<std::string, std::size_t>> votes;
    std::map<std::string, std::string> member_of;  // label -> one pool member seen
    for (const auto& p : proj.at("points")) {
      const auto& label = corpus_.truth.at(p.at("id").get<std::string>());
      ++votes[p.at("cluster").get<std::size_t>()][label];
      member_of.emplace(label, p.at("id").get<std::string>());
    }
    std::vector<std::string> named;
    for (const auto& [_, v] : votes) {
      const auto top = std::max_element(v.begin(), v.end(),
                                        [](const auto& a, const auto& b) { return a.second < b.second; });
      if (wanted.count(top->first) &&
          std::find(named.begin(), named.end(), top->first) == named.end()) {
        named.push_back(top->first);
      }
    }
    // Classes merged into another cluster are found by browsing related images.
    for (const auto& label : labels) {
      if (std::find(named.begin(), named.end(), label) != named.end()) continue;
      auto it = member_of.find(label);
      if (it == member_of.end()) {
        task.missed_labels.push_back(label);
        continue;
      }
      const auto rel = call("GET", "/related/" + it->second, {{"k", "20"}});
      std::size_t same = 0;
      for (const auto& item : rel.at("items")) same += corpus_.truth.at(item.at("proposal_id")) == label;
      if (same > 0) {
        named.push_back(label);
      } else {
        task.missed_labels.push_back(label);
      }
    }

    for (const auto& label : named) {
      const auto created = call("POST", "/sessions", {}, nlohmann::json{{"label", label}});
      const std::string id = created.at("session_id");
      const auto& phrases = created.at("phrase_list").at("phrases");
      const auto& truth = true_phrases_.at(label);
      std::vector<std::size_t> pick;
      for (std::size_t i = 0; i < phrases.size(); ++i) {
        if (std::find(truth.begin(), truth.end(), phrases[i].get<std::string>()) != truth.end()) pick.push_back(i);
      }
      if (pick.empty()) pick.push_back(0);
      call("POST", "/sessions/" + id + "/phrases/select", {}, nlohmann::json{{"indices", pick}});

      const auto cand = call("GET", "/sessions/" + id + "/candidates");
      std::vector<std::string> wrong_simple, right_hard;
      for (const auto& r : cand.at("simple")) {
        if (corpus_.truth.at(r.at("proposal_id")) != label) wrong_simple.push_back(r.at("proposal_id"));
      }
      for (const auto& r : cand.at("hard")) {
        if (corpus_.truth.at(r.at("proposal_id")) == label) right_hard.push_back(r.at("proposal_id"));
      }
      call("POST", "/sessions/" + id + "/annotate", {}, nlohmann::json{{"mode", "delete"}, {"ids", wrong_simple}});
      const auto after = call("POST", "/sessions/" + id + "/annotate", {},
                            nlohmann::json{{"mode", "reserve"}, {"ids", right_hard}});
      if (after.at("accepted_simple").get<std::size_t>() + after.at("accepted_hard").get<std::size_t>() == 0) {
        task.missed_labels.push_back(label);
        continue;
      }
      const auto fin = call("POST", "/sessions/" + id + "/finalize", {}, nlohmann::json::object());
      task.sessions.push_back({{"session_id", id},
                               {"label", label},
                               {"simple_candidates", cand.at("simple_count")},
                               {"deleted", wrong_simple.size()},
                               {"accepted_simple", fin.at("accepted_simple")},
                               {"accepted_hard", fin.at("accepted_hard")},
                               {"selected_phrases", pick.size()}});
      task.session_ids.push_back(id);
      task.labels.push_back(label);
    }
    if (task.session_ids.empty()) throw StateError("the annotator found nothing to label");
    nlohmann::json body = {{"session_ids", task.session_ids}, {"ablation", opt.ablation}};
    if (opt.hyperparams) body["hyperparams"] = *opt.hyperparams;
    task.train = call("POST", "/train", {}, body);
    task.eval = call("GET", "/eval");
    return task;
  }

 private:
  nlohmann::json call(const std::string& method, const std::string& path,
                      std::map<std::string, std::string> query = {},
                      const std::optional<nlohmann::json>& body = std::nullopt) {
    const auto res = api_({method, path, std::move(query), body ? body->dump() : std::string()});
    if (res.status >= 400) {
      throw StateError(method + " " + path + " failed with " + std::to_string(res.status) + ": " + res.body.dump());
    }
    return res.body;
  }

  ApiTransport api_;
  const SyntheticCorpus& corpus_;
  std::map<std::string, std::vector<std::string>> true_phrases_;
};

}  // namespace owclip
