#pragma once

#include <atomic>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "owclip/checkpoint.hpp"
#include "owclip/config.hpp"
#include "owclip/discovery.hpp"
#include "owclip/embedding_store.hpp"
#include "owclip/evaluation.hpp"
#include "owclip/image_encoder.hpp"
#include "owclip/llm_http.hpp"
#include "owclip/manifest.hpp"
#include "owclip/phrase_gen.hpp"
#include "owclip/prompt_tuner.hpp"
#include "owclip/refinement.hpp"
#include "owclip/session.hpp"
#include "owclip/text_encoder.hpp"

namespace owclip {

enum class AblationMode { kFull, kWoPhraseSelection, kWoLlm, kWoDifferentiation, kWoCs };

inline AblationMode parse_ablation(const std::string& s) {
  if (s.empty() || s == "full") return AblationMode::kFull;
  if (s == "wo-phrase-selection") return AblationMode::kWoPhraseSelection;
  if (s == "wo-llm") return AblationMode::kWoLlm;
  if (s == "wo-differentiation") return AblationMode::kWoDifferentiation;
  if (s == "wo-cs") return AblationMode::kWoCs;
  throw InputError("unknown ablation '" + s +
                   "' (expected full, wo-phrase-selection, wo-llm, wo-differentiation or wo-cs)");
}

inline std::string to_string(AblationMode m) {
  switch (m) {
    case AblationMode::kFull: return "full";
    case AblationMode::kWoPhraseSelection: return "wo-phrase-selection";
    case AblationMode::kWoLlm: return "wo-llm";
    case AblationMode::kWoDifferentiation: return "wo-differentiation";
    case AblationMode::kWoCs: return "wo-cs";
  }
  return "full";
}

struct Proposal {
  std::string id;
  std::string image_path;
  std::string image_file;  // resolved location for serving thumbnails
  Box box;
  std::optional<std::string> gt_label;
  Split split = Split::kTrain;
  Vector descriptor;
  Vector embedding;  // base encoder, no prompts
};

// Routing decision of a train-split proposal. `score` is the cosine against
// the routed class; it never changes once the class's episode is frozen.
struct Route {
  bool known = false;
  std::string label;
  double confidence = 0.0;
  double score = 0.0;
};

inline void to_json(nlohmann::json& j, const Route& r) {
  j = {{"known", r.known}, {"label", r.label}, {"confidence", r.confidence}, {"score", r.score}};
}

inline void from_json(const nlohmann::json& j, Route& r) {
  r.known = j.at("known").get<bool>();
  r.label = j.at("label").get<std::string>();
  r.confidence = j.at("confidence").get<double>();
  r.score = j.at("score").get<double>();
}

// Immutable view served to readers. Writers build a new one and swap it in.
struct ModelSnapshot {
  std::vector<std::shared_ptr<const Proposal>> proposals;
  std::unordered_map<std::string, std::size_t> index;
  std::shared_ptr<const IncrementalClassifier> classifier;
  std::map<std::string, Route> routes;
  std::vector<nlohmann::json> train_reports;
  std::optional<nlohmann::json> last_eval;
  std::uint64_t generation = 0;

  const Proposal* find(const std::string& id) const {
    auto it = index.find(id);
    return it == index.end() ? nullptr : proposals[it->second].get();
  }

  std::vector<const Proposal*> unknown_pool() const {
    std::vector<const Proposal*> out;
    for (const auto& p : proposals) {
      if (p->split != Split::kTrain) continue;
      auto it = routes.find(p->id);
      if (it == routes.end() || !it->second.known) out.push_back(p.get());
    }
    return out;
  }
};

struct TrainRequest {
  std::vector<std::string> session_ids;
  EpisodeHyperparams hyperparams;
  AblationMode ablation = AblationMode::kFull;
};

struct TrainOutcome {
  int episode_id = 0;
  TrainReport report;
  EvalResult eval;
  std::size_t newly_known = 0;
  AblationMode ablation = AblationMode::kFull;
};

inline void to_json(nlohmann::json& j, const TrainOutcome& o) {
  j = {{"episode_id", o.episode_id},
       {"ablation", to_string(o.ablation)},
       {"report", o.report},
       {"eval", o.eval},
       {"newly_known", o.newly_known}};
}

struct TrainStatus {
  std::string state = "idle";  // idle | running | done | failed
  std::optional<std::vector<std::string>> session_ids;
  std::size_t epoch = 0;
  std::size_t epochs = 0;
  std::optional<double> last_loss;
  std::optional<nlohmann::json> result;
  std::optional<std::string> error;
  std::optional<std::string> error_kind;
};

inline void to_json(nlohmann::json& j, const TrainStatus& s) {
  j = {{"state", s.state},
       {"epoch", s.epoch},
       {"epochs", s.epochs},
       {"last_loss", s.last_loss ? nlohmann::json(*s.last_loss) : nlohmann::json()},
       {"session_ids", s.session_ids ? nlohmann::json(*s.session_ids) : nlohmann::json()},
       {"result", s.result ? *s.result : nlohmann::json()},
       {"error", s.error ? nlohmann::json(*s.error) : nlohmann::json()},
       {"error_kind", s.error_kind ? nlohmann::json(*s.error_kind) : nlohmann::json()}};
}

struct ProjectionRequest {
  ProjectionMethod method = ProjectionMethod::kTsne;
  std::uint64_t seed = 0;
  std::size_t kmin = 2;
  std::size_t kmax = 10;
};

// Cached result of one projection + clustering run over the unknown pool.
struct ProjectionJob {
  std::string state = "running";  // running | done | failed
  std::size_t iteration = 0;
  std::size_t total = 0;
  Projection2D projection;
  std::vector<std::size_t> clusters;
  std::optional<KSelection> selection;
  std::string error;
};

inline nlohmann::json projection_json(const ProjectionJob& job) {
  nlohmann::json j = {{"status", job.state}, {"progress", {{"iteration", job.iteration}, {"total", job.total}}}};
  if (job.state == "failed") j["error"] = job.error;
  if (job.state != "done") return j;
  auto pts = nlohmann::json::array();
  for (std::size_t i = 0; i < job.projection.ids.size(); ++i) {
    pts.push_back({{"id", job.projection.ids[i]},
                   {"x", job.projection.points[i][0]},
                   {"y", job.projection.points[i][1]},
                   {"cluster", job.clusters.empty() ? 0 : job.clusters[i]}});
  }
  j["method"] = to_string(job.projection.method);
  j["seed"] = job.projection.seed;
  j["points"] = pts;
  j["clusters"] = job.selection ? nlohmann::json(*job.selection) : nlohmann::json();
  return j;
}

inline std::shared_ptr<const ImageEncoder> make_encoder(const ServiceConfig& cfg) {
  if (cfg.backend == "toy") {
    ToyEncoderConfig tc;
    tc.seed = cfg.encoder_seed;
    return std::make_shared<ToyImageEncoder>(tc);
  }
  return std::make_shared<PrecomputedEncoder>(cfg.embedding_dim);
}

// The annotation and training loop over one data directory:
//
//   <data_dir>/proposals.jsonl      ingested rows (with resolved descriptors)
//   <data_dir>/routes.json          known/unknown decision per train proposal
//   <data_dir>/reports.json         train reports and the latest evaluation
//   <data_dir>/checkpoints/         one binary checkpoint per episode
//   <data_dir>/sessions/            per-session event logs and snapshots
//
// Readers work on immutable snapshots; one training job runs at a time and
// holds no lock while it computes.
class Workbench {
 public:
  explicit Workbench(ServiceConfig cfg, std::shared_ptr<LLMProvider> provider = nullptr)
      : cfg_(std::move(cfg)),
        dir_(cfg_.data_dir),
        encoder_(make_encoder(cfg_)),
        text_(std::make_shared<HashTextEncoder>(cfg_.embedding_dim)),
        provider_(provider ? std::move(provider) : std::shared_ptr<LLMProvider>(make_provider(cfg_.llm))) {
    cfg_.validate();
    prepare_dir();
    sessions_store_ = std::make_unique<SessionStore>(dir_ / "sessions", cfg_.snapshot_every);
    for (const auto& w : target_inversion_warnings(cfg_.crop)) spdlog::info("crop smoothing: {}", w);
    load_state();
  }

  ~Workbench() {
    cancel_.store(true);
    std::vector<std::thread> threads;
    {
      std::lock_guard lk(threads_mu_);
      threads.swap(threads_);
    }
    for (auto& t : threads) {
      if (t.joinable()) t.join();
    }
  }

  Workbench(const Workbench&) = delete;
  Workbench& operator=(const Workbench&) = delete;

  const ServiceConfig& config() const { return cfg_; }
  const TextEncoder& text_encoder() const { return *text_; }
  const ImageEncoder& image_encoder() const { return *encoder_; }

  std::shared_ptr<const ModelSnapshot> snapshot() const {
    std::lock_guard lk(snap_mu_);
    return snap_;
  }

  // ---- ingestion -------------------------------------------------------

  nlohmann::json ingest(const std::filesystem::path& manifest,
                        const std::optional<std::filesystem::path>& embeddings = {}) {
    auto rows = read_manifest(manifest);
    resolve_descriptors(rows, manifest, embeddings);
    std::lock_guard wl(write_mu_);
    auto cur = snapshot();
    for (const auto& r : rows) {
      if (cur->index.count(r.proposal_id)) {
        throw IngestError(manifest.string() + ": proposal_id '" + r.proposal_id + "' was already ingested");
      }
    }
    auto next = std::make_shared<ModelSnapshot>(*cur);
    std::size_t n_train = 0, n_eval = 0, n_known = 0;
    std::string appended;
    for (auto& r : rows) {
      auto p = std::make_shared<Proposal>();
      p->id = r.proposal_id;
      p->image_path = r.image_path;
      p->image_file = *r.image_file;
      p->box = r.box;
      p->gt_label = r.gt_label;
      p->split = r.split;
      p->descriptor = *r.descriptor;
      p->embedding = encoder_->encode(p->descriptor);
      appended += nlohmann::json(r).dump() + "\n";
      if (p->split == Split::kTrain) {
        ++n_train;
        const Route route = route_one(*next->classifier, p->descriptor);
        n_known += route.known;
        next->routes[p->id] = route;
      } else {
        ++n_eval;
      }
      next->index[p->id] = next->proposals.size();
      next->proposals.push_back(std::move(p));
    }
    if (!rows.empty()) {
      std::ofstream f(dir_ / "proposals.jsonl", std::ios::app | std::ios::binary);
      f << appended;
      f.flush();
      if (!f) throw StateError("cannot append to proposals.jsonl");
      ++next->generation;
      write_routes(*next);
      publish(std::move(next));
    }
    spdlog::info("ingested {} proposals ({} train, {} eval, {} routed known)", rows.size(), n_train, n_eval, n_known);
    auto s = snapshot();
    return {{"ingested", rows.size()},
            {"train", n_train},
            {"eval", n_eval},
            {"routed_known", n_known},
            {"routed_unknown", n_train - n_known},
            {"pools", pool_counts(*s)}};
  }

  // File behind a proposal's image_path, for thumbnails.
  std::filesystem::path image_file(const std::string& id) const {
    const auto* p = snapshot()->find(id);
    if (!p) throw NotFoundError("unknown proposal '" + id + "'");
    if (!std::filesystem::is_regular_file(p->image_file)) {
      throw NotFoundError("image of proposal '" + id + "' not found at " + p->image_file);
    }
    return p->image_file;
  }

  nlohmann::json pool_counts(const ModelSnapshot& s) const {
    std::size_t known = 0, unknown = 0, eval = 0;
    for (const auto& p : s.proposals) {
      if (p->split == Split::kEval) {
        ++eval;
        continue;
      }
      auto it = s.routes.find(p->id);
      (it != s.routes.end() && it->second.known) ? ++known : ++unknown;
    }
    return {{"known", known}, {"unknown", unknown}, {"eval", eval}, {"total", s.proposals.size()}};
  }

  nlohmann::json unknown_pool_json() const {
    auto s = snapshot();
    auto items = nlohmann::json::array();
    for (const auto* p : s->unknown_pool()) {
      items.push_back({{"proposal_id", p->id}, {"image_path", p->image_path}, {"box", p->box}});
    }
    return {{"count", items.size()}, {"proposals", items}, {"pools", pool_counts(*s)}};
  }

  std::vector<PoolItem> unknown_pool_items(const ModelSnapshot& s) const {
    std::vector<PoolItem> pool;
    for (const auto* p : s.unknown_pool()) pool.push_back({p->id, p->embedding});
    return pool;
  }

  // ---- discovery -------------------------------------------------------

  // Starts (or joins) the projection job for the current unknown pool.
  // With `wait` the call blocks until the job ends.
  nlohmann::json projection(const ProjectionRequest& req, bool wait) {
    auto job = projection_job(req);
    if (wait) {
      std::unique_lock lk(proj_mu_);
      proj_cv_.wait(lk, [&] { return job->state != "running" || cancel_.load(); });
    }
    std::lock_guard lk(proj_mu_);
    return projection_json(*job);
  }

  std::vector<std::string> lasso(const ProjectionRequest& req, const std::vector<Point2>& polygon) {
    if (polygon.size() < 3) throw InputError("lasso polygon needs at least 3 vertices");
    auto job = projection_job(req);
    std::unique_lock lk(proj_mu_);
    proj_cv_.wait(lk, [&] { return job->state != "running" || cancel_.load(); });
    if (job->state != "done") throw StateError("projection failed: " + job->error);
    return lasso_select(job->projection, polygon);
  }

  std::vector<RankedItem> related(const std::string& id, std::size_t k) const {
    auto s = snapshot();
    if (!s->find(id)) throw NotFoundError("unknown proposal '" + id + "'");
    return related_images(id, unknown_pool_items(*s), k);
  }

  // ---- annotation sessions ---------------------------------------------

  AnnotationSession create_session(const std::string& raw_label) {
    const std::string label = validate_label(raw_label);
    auto s = snapshot();
    if (s->classifier->source().index_of(label)) throw ConflictError("class '" + label + "' is already known");
    const auto pool = unknown_pool_items(*s);
    if (pool.empty()) throw InputError("the unknown pool is empty");
    int attempts = 0;
    PhraseList phrases = generate_phrases(*provider_, label, cfg_.n_phrases, &attempts);
    AnnotationSession init;
    init.class_label = label;
    init.phrases = std::move(phrases);
    init.records = score_pool(pool, label, *text_);
    init.ranges = default_ranges(init.records);
    init.provider = provider_->name();
    init.llm_attempts = attempts;
    std::lock_guard lk(sessions_mu_);
    init.id = next_session_id();
    AnnotationSession created;
    sessions_store_->commit(created, created_event(init));
    sessions_.emplace(created.id, created);
    spdlog::info("session {} opened for '{}' over {} unknown proposals", created.id, label, created.records.size());
    return created;
  }

  AnnotationSession session(const std::string& id) const {
    std::lock_guard lk(sessions_mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw NotFoundError("unknown session '" + id + "'");
    return it->second;
  }

  std::vector<AnnotationSession> sessions() const {
    std::lock_guard lk(sessions_mu_);
    std::vector<AnnotationSession> out;
    for (const auto& [_, s] : sessions_) out.push_back(s);
    return out;
  }

  // Applies one mutating event. A supplied `expected_version` must match the
  // session's current version.
  AnnotationSession update_session(const std::string& id, const nlohmann::json& event,
                                   std::optional<std::uint64_t> expected_version = {}) {
    std::lock_guard lk(sessions_mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw NotFoundError("unknown session '" + id + "'");
    if (expected_version && *expected_version != it->second.version) {
      throw ConflictError("session " + id + " is at version " + std::to_string(it->second.version) +
                          ", request expected " + std::to_string(*expected_version));
    }
    sessions_store_->commit(it->second, event);
    return it->second;
  }

  AnnotationSession select_session_phrases(const std::string& id, const std::vector<std::size_t>& indices,
                                           std::optional<std::uint64_t> version = {}) {
    return update_session(id, {{"type", "phrases_selected"}, {"indices", indices}}, version);
  }

  AnnotationSession set_session_ranges(const std::string& id, const ThresholdRanges& r,
                                       std::optional<std::uint64_t> version = {}) {
    return update_session(id, {{"type", "ranges_set"}, {"ranges", r}}, version);
  }

  AnnotationSession annotate(const std::string& id, AnnotationMode mode, const std::vector<std::string>& ids,
                             std::optional<ThresholdRanges> ranges = {}, std::optional<std::uint64_t> version = {}) {
    nlohmann::json ev = {{"type", "annotated"}, {"mode", to_string(mode)}, {"ids", ids}};
    if (ranges) ev["ranges"] = *ranges;
    return update_session(id, ev, version);
  }

  AnnotationSession finalize_session(const std::string& id, std::optional<std::uint64_t> version = {}) {
    return update_session(id, {{"type", "finalized"}}, version);
  }

  // ---- training --------------------------------------------------------

  TrainOutcome train(const TrainRequest& req) {
    TrainerSlot slot(busy_);
    {
      std::lock_guard lk(status_mu_);
      status_ = TrainStatus{};
      status_.state = "running";
      status_.session_ids = req.session_ids;
      status_.epochs = req.hyperparams.epochs;
    }
    try {
      auto out = train_locked(req);
      std::lock_guard lk(status_mu_);
      status_.state = "done";
      status_.result = nlohmann::json(out);
      return out;
    } catch (const Error& e) {
      std::lock_guard lk(status_mu_);
      status_.state = "failed";
      status_.error = e.what();
      status_.error_kind = e.kind();
      throw;
    }
  }

  // Runs the job on a worker thread; progress is reported by train_status().
  TrainStatus train_async(const TrainRequest& req) {
    auto slot = std::make_shared<TrainerSlot>(busy_);
    {
      std::lock_guard lk(status_mu_);
      status_ = TrainStatus{};
      status_.state = "running";
      status_.session_ids = req.session_ids;
      status_.epochs = req.hyperparams.epochs;
    }
    std::lock_guard tl(threads_mu_);
    threads_.emplace_back([this, req, slot] {
      try {
        auto out = train_locked(req);
        std::lock_guard lk(status_mu_);
        status_.state = "done";
        status_.result = nlohmann::json(out);
      } catch (const Error& e) {
        spdlog::error("training failed: {}", e.what());
        std::lock_guard lk(status_mu_);
        status_.state = "failed";
        status_.error = e.what();
        status_.error_kind = e.kind();
      } catch (const std::exception& e) {
        spdlog::error("training failed: {}", e.what());
        std::lock_guard lk(status_mu_);
        status_.state = "failed";
        status_.error = e.what();
        status_.error_kind = "InternalError";
      }
    });
    return train_status();
  }

  TrainStatus train_status() const {
    std::lock_guard lk(status_mu_);
    return status_;
  }

  bool training() const { return busy_.load(); }

  // ---- evaluation and classes ------------------------------------------

  EvalResult evaluate() const { return evaluate_snapshot(*snapshot()); }

  nlohmann::json classes_json() const {
    auto s = snapshot();
    const auto& clf = *s->classifier;
    auto out = nlohmann::json::array();
    for (std::size_t k = 0; k < clf.source().size(); ++k) {
      const auto& e = clf.source().at(k);
      std::size_t routed = 0;
      for (const auto& [_, r] : s->routes) routed += r.known && r.label == e.label;
      out.push_back({{"index", k}, {"label", e.label}, {"episode_id", e.episode_id}, {"phrases", e.phrases},
                     {"known_proposals", routed}});
    }
    auto eps = nlohmann::json::array();
    for (std::size_t t = 0; t < clf.episodes().size(); ++t) {
      const auto& ep = clf.episodes()[t];
      eps.push_back({{"episode_id", ep.id},
                     {"classes", ep.class_indices.size()},
                     {"hyperparams", ep.hyperparams},
                     {"frozen_fingerprint", to_hex(ep.frozen_fingerprint)},
                     {"parameter_sha256", to_hex(sha256(clf.episode_parameter_bytes(t)))}});
    }
    return {{"classes", out}, {"episodes", eps}, {"temperature", cfg_.temperature}, {"t_threshold", cfg_.t_threshold}};
  }

  std::string checkpoint_bytes(std::size_t t) const { return encode_checkpoint(*snapshot()->classifier, t); }

  Route route_one(const IncrementalClassifier& clf, std::span<const double> descriptor) const {
    Route r;
    if (clf.source().empty()) return r;
    const auto row = clf.classify_image(descriptor, cfg_.temperature);
    const auto d = route_proposal(row, clf.source(), cfg_.t_threshold);
    const std::size_t k = argmax(row.probs);
    r.known = d.known;
    r.label = d.known ? d.label : std::string();
    r.confidence = row.probs[k];
    r.score = row.scores[k];
    return r;
  }

  EvalResult evaluate_snapshot(const ModelSnapshot& s) const {
    const auto& clf = *s.classifier;
    const auto& src = clf.source();
    std::vector<std::pair<std::string, ClassGroup>> classes;
    const int latest = clf.episodes().empty() ? 0 : clf.episodes().back().id;
    for (const auto& e : src.entries()) {
      classes.emplace_back(e.label, e.episode_id == latest ? ClassGroup::kCurrent : ClassGroup::kPrevious);
    }
    std::vector<Detection> dets;
    std::vector<GroundTruth> gts;
    GroupAccuracy acc_prev, acc_cur;
    std::size_t unknown_total = 0, unknown_hit = 0;
    for (const auto& p : s.proposals) {
      if (p->split != Split::kEval || !p->gt_label) continue;
      const auto gt_idx = src.index_of(*p->gt_label);
      std::optional<LogitsRow> row;
      if (!src.empty()) row = clf.classify_image(p->descriptor, cfg_.temperature);
      if (gt_idx) {
        gts.push_back({p->image_path, *p->gt_label, p->box});
        const bool correct = argmax(row->probs) == *gt_idx;
        auto& acc = src.at(*gt_idx).episode_id == latest ? acc_cur : acc_prev;
        ++acc.total;
        acc.correct += correct;
      }
      bool known = false;
      if (row) {
        const auto d = route_proposal(*row, src, cfg_.t_threshold);
        if (d.known) {
          known = true;
          dets.push_back({p->image_path, d.label, d.confidence, p->box});
        }
      }
      if (!gt_idx) {
        ++unknown_total;
        unknown_hit += !known;
      }
    }
    EvalResult r = evaluate_detections(dets, gts, classes);
    r.accuracy_previous = acc_prev;
    r.accuracy_current = acc_cur;
    if (unknown_total > 0) r.unknown_recall = static_cast<double>(unknown_hit) / static_cast<double>(unknown_total);
    return r;
  }

 private:
  // Claims the single trainer slot for its lifetime.
  class TrainerSlot {
   public:
    explicit TrainerSlot(std::atomic<bool>& busy) : busy_(busy) {
      bool expected = false;
      if (!busy_.compare_exchange_strong(expected, true)) throw BusyError("a training job is already running");
    }
    ~TrainerSlot() { busy_.store(false); }
    TrainerSlot(const TrainerSlot&) = delete;
    TrainerSlot& operator=(const TrainerSlot&) = delete;

   private:
    std::atomic<bool>& busy_;
  };

  void prepare_dir() {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw StartupError("cannot create data dir " + dir_.string() + ": " + ec.message());
    std::filesystem::create_directories(dir_ / "checkpoints", ec);
    if (ec) throw StartupError("cannot create " + (dir_ / "checkpoints").string() + ": " + ec.message());
    const auto probe = dir_ / ".write-probe";
    {
      std::ofstream f(probe);
      f << "ok";
      if (!f) throw StartupError("data dir " + dir_.string() + " is not writable");
    }
    std::filesystem::remove(probe, ec);
  }

  void load_state() {
    auto s = std::make_shared<ModelSnapshot>();
    auto clf = std::make_shared<IncrementalClassifier>(encoder_, cfg_.prompt_length);
    std::vector<std::filesystem::path> ckpts;
    for (const auto& e : std::filesystem::directory_iterator(dir_ / "checkpoints")) {
      if (e.path().extension() == ".owckpt") ckpts.push_back(e.path());
    }
    std::sort(ckpts.begin(), ckpts.end());
    restore_checkpoints(*clf, ckpts);
    s->classifier = clf;

    const auto props = dir_ / "proposals.jsonl";
    if (std::filesystem::exists(props)) {
      std::ifstream f(props);
      for (auto& r : parse_manifest(f, props.string())) {
        if (!r.descriptor) throw FormatError(props.string() + ": row '" + r.proposal_id + "' has no descriptor");
        auto p = std::make_shared<Proposal>();
        p->id = r.proposal_id;
        p->image_path = r.image_path;
        p->image_file = r.image_file.value_or(r.image_path);
        p->box = r.box;
        p->gt_label = r.gt_label;
        p->split = r.split;
        p->descriptor = std::move(*r.descriptor);
        p->embedding = encoder_->encode(p->descriptor);
        s->index[p->id] = s->proposals.size();
        s->proposals.push_back(std::move(p));
      }
    }
    const auto routes = dir_ / "routes.json";
    if (std::filesystem::exists(routes)) {
      std::ifstream f(routes);
      const auto j = nlohmann::json::parse(f);
      s->generation = j.at("generation").get<std::uint64_t>();
      s->routes = j.at("routes").get<std::map<std::string, Route>>();
    }
    // Rows appended after the last routes.json write (crash mid-ingest).
    for (const auto& p : s->proposals) {
      if (p->split == Split::kTrain && !s->routes.count(p->id)) s->routes[p->id] = route_one(*clf, p->descriptor);
    }
    const auto reports = dir_ / "reports.json";
    if (std::filesystem::exists(reports)) {
      std::ifstream f(reports);
      const auto j = nlohmann::json::parse(f);
      s->train_reports = j.at("train_reports").get<std::vector<nlohmann::json>>();
      if (!j.at("last_eval").is_null()) s->last_eval = j["last_eval"];
    }
    snap_ = s;
    sessions_ = sessions_store_->load_all();
    for (const auto& [id, _] : sessions_) {
      if (id.size() > 2) next_session_ = std::max<std::uint64_t>(next_session_, std::stoull(id.substr(2)) + 1);
    }
    spdlog::info("data dir {}: {} proposals, {} episodes, {} sessions", dir_.string(), s->proposals.size(),
                 clf->episodes().size(), sessions_.size());
  }

  std::string next_session_id() {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s-%06llu", static_cast<unsigned long long>(next_session_++));
    return buf;
  }

  void resolve_descriptors(std::vector<ManifestRow>& rows, const std::filesystem::path& manifest,
                           const std::optional<std::filesystem::path>& embeddings) {
    const auto base = manifest.parent_path();
    std::optional<std::unordered_map<std::string, Vector>> store_rows;
    auto load_store = [&] {
      if (store_rows) return;
      std::filesystem::path path = embeddings ? *embeddings : manifest;
      if (!embeddings) path.replace_extension(".owemb");
      if (!std::filesystem::exists(path)) throw IngestError("embedding store " + path.string() + " not found");
      EmbeddingStore store;
      std::vector<std::string> ids;
      try {
        store = read_embedding_store(path);
        ids = read_sidecar_index(path, store.header.count);
      } catch (const FormatError& e) {
        throw IngestError(path.string() + ": " + e.what());
      }
      store_rows.emplace();
      for (std::size_t i = 0; i < ids.size(); ++i) (*store_rows)[ids[i]] = store.row_f64(i);
    };
    for (auto& r : rows) {
      std::filesystem::path file = r.image_path;
      r.image_file = (file.is_relative() ? std::filesystem::absolute(base / file) : file).lexically_normal().string();
      if (!r.descriptor) {
        if (cfg_.backend == "file") {
          load_store();
          auto it = store_rows->find(r.proposal_id);
          if (it == store_rows->end()) throw IngestError("no stored embedding for proposal '" + r.proposal_id + "'");
          r.descriptor = it->second;
        } else {
          std::filesystem::path img = r.image_path;
          if (img.is_relative()) img = base / img;
          r.descriptor = read_descriptor_file(img);
        }
      }
      if (r.descriptor->size() != encoder_->input_dim()) {
        throw IngestError("proposal '" + r.proposal_id + "' has a descriptor of dim " +
                          std::to_string(r.descriptor->size()) + ", the " + cfg_.backend + " backend expects " +
                          std::to_string(encoder_->input_dim()));
      }
    }
  }

  void publish(std::shared_ptr<ModelSnapshot> next) {
    std::lock_guard lk(snap_mu_);
    snap_ = std::move(next);
  }

  void write_routes(const ModelSnapshot& s) const {
    const nlohmann::json j = {{"generation", s.generation}, {"routes", s.routes}};
    write_file_atomic(dir_ / "routes.json", j.dump() + "\n");
  }

  void write_reports(const ModelSnapshot& s) const {
    const nlohmann::json j = {{"train_reports", s.train_reports},
                              {"last_eval", s.last_eval ? *s.last_eval : nlohmann::json()}};
    write_file_atomic(dir_ / "reports.json", j.dump() + "\n");
  }

  std::vector<std::string> phrases_for(const AnnotationSession& s, AblationMode mode) const {
    switch (mode) {
      case AblationMode::kWoLlm: return label_only_phrases(s.class_label);
      case AblationMode::kWoPhraseSelection: return s.phrases.phrases;
      default: return s.phrases.selected_phrases();
    }
  }

  TrainOutcome train_locked(const TrainRequest& req) {
    if (req.session_ids.empty()) throw InputError("training needs at least one session");
    req.hyperparams.validate();
    std::vector<AnnotationSession> picked;
    {
      std::lock_guard lk(sessions_mu_);
      std::unordered_set<std::string> seen_ids, seen_labels;
      for (const auto& id : req.session_ids) {
        if (!seen_ids.insert(id).second) throw InputError("session '" + id + "' listed twice");
        auto it = sessions_.find(id);
        if (it == sessions_.end()) throw NotFoundError("unknown session '" + id + "'");
        const auto& s = it->second;
        if (s.state != SessionState::kFinalized) throw StateError("session " + id + " is not finalized");
        if (s.trained_episode) throw ConflictError("session " + id + " was already used by episode " +
                                                   std::to_string(*s.trained_episode));
        if (!seen_labels.insert(s.class_label).second) {
          throw ConflictError("two sessions share the label '" + s.class_label + "'");
        }
        picked.push_back(s);
      }
    }
    auto base = snapshot();
    for (const auto& s : picked) {
      if (base->classifier->source().index_of(s.class_label)) {
        throw ConflictError("class '" + s.class_label + "' is already known");
      }
    }

    // Episode input is built from the frozen session contents in one pass, so
    // either every accepted image and phrase of a session is used or the job
    // fails before anything changes.
    auto clf = std::make_shared<IncrementalClassifier>(*base->classifier);
    const std::size_t q0 = clf->source().size();
    std::vector<ClassEntry> entries;
    std::vector<LabeledImage> images;
    for (std::size_t j = 0; j < picked.size(); ++j) {
      const auto& s = picked[j];
      auto phrases = phrases_for(s, req.ablation);
      if (phrases.empty()) throw NoPhrasesError("session " + s.id + " has no phrases to initialize from");
      entries.push_back(init_class_entry(s.class_label, std::move(phrases), *text_));
      std::unordered_set<std::string> used;
      auto add = [&](const std::string& id, Difficulty d) {
        if (!used.insert(id).second) return;
        const Proposal* p = base->find(id);
        if (!p) throw StateError("session " + s.id + " references missing proposal '" + id + "'");
        images.push_back({p->descriptor, q0 + j, d});
      };
      for (const auto& id : s.accepted_simple_ids) add(id, Difficulty::kSimple);
      const Difficulty hard =
          req.ablation == AblationMode::kWoDifferentiation ? Difficulty::kSimple : Difficulty::kHard;
      for (const auto& id : s.accepted_hard_ids) add(id, hard);
    }
    clf->begin_episode(std::move(entries), req.hyperparams);
    TrainOptions opts;
    opts.crop = cfg_.crop;
    opts.one_hot = req.ablation == AblationMode::kWoCs;
    opts.on_epoch = [this](const EpochStats& st) {
      std::lock_guard lk(status_mu_);
      status_.epoch = st.epoch + 1;
      status_.last_loss = st.mean_loss;
    };
    spdlog::info("training episode {} on {} sessions, {} images, ablation {}", clf->episodes().back().id,
                 picked.size(), images.size(), to_string(req.ablation));
    TrainOutcome out;
    out.ablation = req.ablation;
    out.report = clf->train_episode(images, opts);
    out.episode_id = out.report.episode_id;
    for (const auto& w : out.report.warnings) spdlog::warn("episode {}: {}", out.episode_id, w);

    {
      std::lock_guard wl(write_mu_);
      auto cur = snapshot();
      auto next = std::make_shared<ModelSnapshot>(*cur);
      next->classifier = clf;
      // Known proposals stay known; only the unknown pool is re-routed.
      for (const auto& p : next->proposals) {
        if (p->split != Split::kTrain) continue;
        auto& r = next->routes[p->id];
        if (r.known) continue;
        r = route_one(*clf, p->descriptor);
        out.newly_known += r.known;
      }
      ++next->generation;
      write_file_atomic(checkpoint_path(dir_ / "checkpoints", out.episode_id),
                        encode_checkpoint(*clf, clf->episodes().size() - 1));
      {
        std::lock_guard lk(sessions_mu_);
        for (const auto& s : picked) {
          sessions_store_->commit(sessions_.at(s.id), {{"type", "trained"}, {"episode_id", out.episode_id}});
        }
      }
      out.eval = evaluate_snapshot(*next);
      nlohmann::json report = out.report;
      report["ablation"] = to_string(req.ablation);
      report["session_ids"] = req.session_ids;
      next->train_reports.push_back(report);
      next->last_eval = nlohmann::json(out.eval);
      write_routes(*next);
      write_reports(*next);
      publish(std::move(next));
    }
    spdlog::info("episode {} done: {} proposals newly known, mAP both {}", out.episode_id, out.newly_known,
                 out.eval.map_both ? std::to_string(*out.eval.map_both) : "n/a");
    return out;
  }

  std::string projection_key(const ModelSnapshot& s, const ProjectionRequest& req) const {
    Sha256 h;
    for (const auto* p : s.unknown_pool()) {
      h.update(p->id);
      h.update(std::string_view("\0", 1));
      h.update(p->embedding);
    }
    return to_hex(h.finish()) + "/" + to_string(req.method) + "/" + std::to_string(req.seed) + "/" +
           std::to_string(req.kmin) + "/" + std::to_string(req.kmax);
  }

  std::shared_ptr<ProjectionJob> projection_job(const ProjectionRequest& req) {
    if (req.kmin < 2 || req.kmax < req.kmin) throw InputError("cluster range needs 2 <= kmin <= kmax");
    auto s = snapshot();
    const auto key = projection_key(*s, req);
    std::lock_guard lk(proj_mu_);
    if (auto it = proj_cache_.find(key); it != proj_cache_.end()) return it->second;
    const auto pool = unknown_pool_items(*s);
    if (pool.size() < 2) throw InputError("projection needs at least 2 unknown proposals");
    auto job = std::make_shared<ProjectionJob>();
    job->total = req.method == ProjectionMethod::kTsne ? TsneOptions{}.iterations : 1;
    proj_cache_[key] = job;
    std::lock_guard tl(threads_mu_);
    threads_.emplace_back([this, job, pool, req] { run_projection(job, pool, req); });
    return job;
  }

  void run_projection(const std::shared_ptr<ProjectionJob>& job, const std::vector<PoolItem>& pool,
                      const ProjectionRequest& req) {
    std::vector<std::string> ids;
    std::vector<Vector> pts;
    for (const auto& p : pool) {
      ids.push_back(p.proposal_id);
      pts.push_back(p.embedding);
    }
    try {
      TsneOptions opt;
      opt.progress = [&](std::size_t it, std::size_t total) {
        std::lock_guard lk(proj_mu_);
        job->iteration = it;
        job->total = total;
        return !cancel_.load();
      };
      auto proj = project_2d(ids, pts, req.method, req.seed, opt);
      std::vector<std::size_t> clusters;
      std::optional<KSelection> sel;
      const std::size_t kmax = std::min(req.kmax, pts.size() - 1);
      if (kmax >= req.kmin) {
        sel = select_k(pts, req.kmin, kmax, req.seed);
        clusters = kmeans(pts, sel->k_star, req.seed).assignments;
      }
      std::lock_guard lk(proj_mu_);
      job->projection = std::move(proj);
      job->clusters = std::move(clusters);
      job->selection = std::move(sel);
      job->iteration = job->total;
      job->state = "done";
    } catch (const std::exception& e) {
      std::lock_guard lk(proj_mu_);
      job->state = "failed";
      job->error = e.what();
    }
    proj_cv_.notify_all();
  }

  ServiceConfig cfg_;
  std::filesystem::path dir_;
  std::shared_ptr<const ImageEncoder> encoder_;
  std::shared_ptr<const TextEncoder> text_;
  std::shared_ptr<LLMProvider> provider_;
  std::unique_ptr<SessionStore> sessions_store_;

  mutable std::mutex snap_mu_;
  std::shared_ptr<const ModelSnapshot> snap_;
  std::mutex write_mu_;

  mutable std::mutex sessions_mu_;
  std::map<std::string, AnnotationSession> sessions_;
  std::uint64_t next_session_ = 1;

  std::atomic<bool> busy_{false};
  mutable std::mutex status_mu_;
  TrainStatus status_;

  std::mutex proj_mu_;
  std::condition_variable proj_cv_;
  std::map<std::string, std::shared_ptr<ProjectionJob>> proj_cache_;

  std::mutex threads_mu_;
  std::vector<std::thread> threads_;
  std::atomic<bool> cancel_{false};
};

}  // namespace owclip
