#pragma once

// End-to-end experiments shared by `owclip bench` and the acceptance runner.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "owclip/http_server.hpp"
#include "owclip/synthetic.hpp"
#include "owclip/workbench.hpp"

namespace owclip {

// Writes the corpus as manifest.jsonl plus manifest.owemb (+ sidecar index);
// returns the manifest path.
inline std::filesystem::path write_corpus(const SyntheticCorpus& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<ManifestRow> rows = c.rows;
  EmbeddingStore store;
  store.header.count = rows.size();
  store.header.dim = rows.empty() ? 0 : static_cast<std::uint32_t>(rows.front().descriptor->size());
  std::vector<std::string> ids;
  for (auto& r : rows) {
    for (double v : *r.descriptor) store.values.push_back(static_cast<float>(v));
    ids.push_back(r.proposal_id);
    r.descriptor.reset();
  }
  const auto manifest = dir / "manifest.jsonl";
  write_manifest(manifest, rows);
  const auto emb = dir / "manifest.owemb";
  write_embedding_store(emb, store);
  write_sidecar_index(emb, ids);
  return manifest;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct MiniOwodOptions {
  std::filesystem::path work_dir;
  std::uint64_t seed = 0;
  std::size_t train_per_class = 200;
  std::size_t eval_per_class = 50;
  double spread = 0.5;
  std::string ablation = "full";
  bool over_http = true;
};

// 8 known then 4 unknown classes, each task labeled by the scripted annotator
// through the API and trained as one episode. The corpus stores float32
// embeddings, so the file backend is used; background crops get per-dim scale
// 1/sqrt(d) to match unit-norm embeddings.
inline nlohmann::json run_mini_owod(const MiniOwodOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  std::filesystem::remove_all(o.work_dir);
  SyntheticSpec spec;
  spec.labels = default_known_labels();
  for (const auto& l : default_unknown_labels()) spec.labels.push_back(l);
  spec.train_per_class = o.train_per_class;
  spec.eval_per_class = o.eval_per_class;
  spec.spread = o.spread;
  spec.seed = o.seed;
  MockProvider mock;
  HashTextEncoder text(spec.dim);
  const auto corpus = make_corpus(spec, text, mock);
  const auto manifest = write_corpus(corpus, o.work_dir / "corpus");

  ServiceConfig cfg;
  cfg.backend = "file";
  cfg.embedding_dim = spec.dim;
  cfg.data_dir = (o.work_dir / "data").string();
  cfg.crop.background_scale = 1.0 / std::sqrt(static_cast<double>(spec.dim));
  cfg.train.seed = o.seed;
  Workbench wb(cfg);
  std::unique_ptr<HttpServer> server;
  ApiTransport transport;
  Api api(wb);
  if (o.over_http) {
    server = std::make_unique<HttpServer>(wb, "127.0.0.1", 0);
    server->start();
    transport = HttpTransport("http://127.0.0.1:" + std::to_string(server->port()));
  } else {
    transport = [&api](const ApiRequest& r) { return api.handle(r); };
  }
  const auto ingest = transport({"POST", "/ingest", {}, nlohmann::json{{"manifest_path", manifest.string()}}.dump()});
  if (ingest.status != 200) throw StateError("ingest failed: " + ingest.body.dump());

  ScriptedAnnotator annotator(transport, corpus);
  AnnotatorOptions opt;
  opt.seed = o.seed;
  opt.kmax = 16;
  opt.ablation = o.ablation;
  const auto task1 = annotator.run_task(default_known_labels(), opt);
  const auto pool_after_1 = transport({"GET", "/pool/unknown", {}, ""}).body;
  const auto task2 = annotator.run_task(default_unknown_labels(), opt);
  if (server) server->stop();

  auto embed = [](const Vector& v) { return l2_normalized(v); };
  const double oracle_current = nearest_centroid_accuracy(corpus, default_unknown_labels(), embed);
  const double oracle_previous = nearest_centroid_accuracy(corpus, default_known_labels(), embed);
  const double acc1 = task1.eval.at("accuracy_current_known").get<double>();
  const double acc2_prev = task2.eval.at("accuracy_previous_known").get<double>();
  const double acc2_cur = task2.eval.at("accuracy_current_known").get<double>();
  std::map<std::string, std::size_t> pool_by_label;
  for (const auto& item : pool_after_1.at("proposals")) ++pool_by_label[corpus.truth.at(item.at("proposal_id"))];
  return {{"seed", o.seed},
          {"ablation", o.ablation},
          {"oracle_current", oracle_current},
          {"oracle_previous", oracle_previous},
          {"task1", {{"labels", task1.labels}, {"missed", task1.missed_labels}, {"sessions", task1.sessions},
                     {"eval", task1.eval}}},
          {"pool_after_task1", pool_by_label},
          {"task2", {{"labels", task2.labels}, {"missed", task2.missed_labels}, {"sessions", task2.sessions},
                     {"eval", task2.eval}}},
          {"accuracy_current", acc2_cur},
          {"accuracy_previous_before", acc1},
          {"accuracy_previous_after", acc2_prev},
          {"previous_drop", acc1 - acc2_prev},
          {"pass_current", acc2_cur >= oracle_current - 0.02},
          {"pass_drop", acc1 - acc2_prev <= 0.02},
          {"seconds", seconds_since(t0)}};
}

// Spearman rank correlation with average ranks for ties; 0 when either side
// is constant.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DimensionError("spearman needs equal-length inputs");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += rx[i] / n, my += ry[i] / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxx == 0.0 || syy == 0.0 ? 0.0 : sxy / std::sqrt(sxx * syy);
}

struct CropEffectOptions {
  std::uint64_t seed = 0;
  std::size_t classes = 8;
  std::size_t train_per_class = 200;
  double spread = 1.0;
  std::vector<double> levels = {0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::size_t eval_per_level = 50;  // per class
};

// Trains the same Gaussian classes twice, with Crop-Smoothing targets and with
// plain one-hot targets, then probes each model with inputs
// c * centroid + (1 - c) * background noise. Reports, per mode, the mean
// ground-truth probability at each completeness level and the Spearman
// correlation between c and that mean (plus the per-sample correlation).
inline nlohmann::json run_crop_effect(const CropEffectOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticSpec spec;
  auto labels = default_known_labels();
  for (const auto& l : default_unknown_labels()) labels.push_back(l);
  if (o.classes < 2 || o.classes > labels.size()) throw ConfigError("crop effect needs 2..12 classes");
  labels.resize(o.classes);
  spec.labels = labels;
  spec.train_per_class = o.train_per_class;
  spec.eval_per_class = 0;
  spec.spread = o.spread;
  spec.seed = o.seed;
  MockProvider mock;
  HashTextEncoder text(spec.dim);
  const auto corpus = make_corpus(spec, text, mock);

  CropSmoothingConfig crop;
  crop.background_scale = 1.0 / std::sqrt(static_cast<double>(spec.dim));
  EpisodeHyperparams hp;
  hp.seed = o.seed;
  auto encoder = std::make_shared<PrecomputedEncoder>(spec.dim);

  std::vector<LabeledImage> images;
  std::map<std::string, std::size_t> index;
  for (std::size_t k = 0; k < labels.size(); ++k) index[labels[k]] = k;
  for (const auto& r : corpus.rows) images.push_back({*r.descriptor, index.at(*r.gt_label), Difficulty::kSimple});

  // Probe inputs are shared by both modes.
  struct Probe {
    double c;
    std::size_t k;
    Vector x;
  };
  std::vector<Probe> probes;
  Rng rng(derive_seed(o.seed, 0xc0de));
  for (double c : o.levels) {
    for (std::size_t k = 0; k < labels.size(); ++k) {
      for (std::size_t i = 0; i < o.eval_per_level; ++i) {
        Vector x(spec.dim);
        for (std::size_t d = 0; d < spec.dim; ++d) {
          x[d] = c * corpus.classes[k].centroid[d] + (1.0 - c) * rng.normal(0.0, crop.background_scale);
        }
        probes.push_back({c, k, std::move(x)});
      }
    }
  }

  nlohmann::json out = {{"seed", o.seed}, {"levels", o.levels}};
  for (const bool one_hot : {false, true}) {
    IncrementalClassifier clf(encoder);
    std::vector<ClassEntry> entries;
    for (const auto& k : corpus.classes) entries.push_back(init_class_entry(k.label, k.true_phrases, text));
    clf.begin_episode(std::move(entries), hp);
    TrainOptions opts;
    opts.crop = crop;
    opts.one_hot = one_hot;
    const auto report = clf.train_episode(images, opts);
    std::vector<double> level_sum(o.levels.size(), 0.0), xs, ps;
    std::vector<std::size_t> level_n(o.levels.size(), 0);
    for (const auto& p : probes) {
      const double prob = clf.classify_image(p.x, hp.temperature).probs[p.k];
      const auto li = static_cast<std::size_t>(std::find(o.levels.begin(), o.levels.end(), p.c) - o.levels.begin());
      level_sum[li] += prob;
      ++level_n[li];
      xs.push_back(p.c);
      ps.push_back(prob);
    }
    std::vector<double> means;
    for (std::size_t i = 0; i < o.levels.size(); ++i) means.push_back(level_sum[i] / static_cast<double>(level_n[i]));
    out[one_hot ? "wo_cs" : "full"] = {{"mean_gt_prob", means},
                                       {"spearman", spearman(o.levels, means)},
                                       {"spearman_per_sample", spearman(xs, ps)},
                                       {"train_accuracy", report.train_accuracy ? *report.train_accuracy : 0.0}};
  }
  out["seconds"] = seconds_since(t0);
  return out;
}

struct FreezeOptions {
  std::filesystem::path work_dir;
  std::uint64_t seed = 0;
  std::size_t train_per_class = 60;
  std::size_t eval_per_class = 20;
};

// Two episodes on the toy backend (real prompt blocks). Records the episode-1
// parameter hash and the episode-1 class scores of every eval proposal after
// episode 1, trains episode 2 and compares.
inline nlohmann::json run_freeze(const FreezeOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  std::filesystem::remove_all(o.work_dir);
  SyntheticSpec spec;
  spec.labels = {"airplane", "bicycle", "zebra", "giraffe"};
  spec.train_per_class = o.train_per_class;
  spec.eval_per_class = o.eval_per_class;
  spec.seed = o.seed;
  MockProvider mock;
  HashTextEncoder text(spec.dim);
  const auto corpus = make_corpus(spec, text, mock);
  std::filesystem::create_directories(o.work_dir);
  const auto manifest = o.work_dir / "manifest.jsonl";
  write_manifest(manifest, corpus.rows);

  ServiceConfig cfg;
  cfg.backend = "toy";
  cfg.data_dir = (o.work_dir / "data").string();
  // With two known classes the top probability is never below 0.5; a high
  // threshold keeps the other classes in the unknown pool for episode 2.
  cfg.t_threshold = 0.99;
  cfg.train.seed = o.seed;
  Workbench wb(cfg);
  wb.ingest(manifest);

  auto run_episode = [&](const std::vector<std::string>& labels) {
    std::vector<std::string> ids;
    for (const auto& label : labels) {
      auto s = wb.create_session(label);
      wb.select_session_phrases(s.id, {0, 1, 2});
      std::vector<std::string> wrong;
      for (const auto& id : s.simple_candidates()) {
        if (corpus.truth.at(id) != label) wrong.push_back(id);
      }
      wb.annotate(s.id, AnnotationMode::kDelete, wrong);
      std::vector<std::string> right;
      for (const auto& id : s.hard_candidates()) {
        if (corpus.truth.at(id) == label) right.push_back(id);
      }
      wb.annotate(s.id, AnnotationMode::kReserve, right);
      wb.finalize_session(s.id);
      ids.push_back(s.id);
    }
    TrainRequest req;
    req.session_ids = ids;
    req.hyperparams = cfg.train;
    return wb.train(req);
  };

  auto scores_of_episode1 = [&](const ModelSnapshot& s) {
    const auto& clf = *s.classifier;
    const auto& cls = clf.episodes().at(0).class_indices;
    std::vector<Vector> out;
    for (const auto& p : s.proposals) {
      if (p->split != Split::kEval) continue;
      const auto all = clf.class_scores(p->descriptor);
      Vector v;
      for (auto k : cls) v.push_back(all[k]);
      out.push_back(std::move(v));
    }
    return out;
  };

  run_episode({"airplane", "bicycle"});
  const auto snap1 = wb.snapshot();
  const auto hash1 = to_hex(sha256(snap1->classifier->episode_parameter_bytes(0)));
  const auto scores1 = scores_of_episode1(*snap1);
  const auto ckpt1 = wb.checkpoint_bytes(0);

  run_episode({"zebra", "giraffe"});
  const auto snap2 = wb.snapshot();
  const auto hash2 = to_hex(sha256(snap2->classifier->episode_parameter_bytes(0)));
  const auto scores2 = scores_of_episode1(*snap2);
  double max_diff = 0.0;
  for (std::size_t i = 0; i < scores1.size(); ++i) {
    for (std::size_t k = 0; k < scores1[i].size(); ++k) {
      max_diff = std::max(max_diff, std::abs(scores1[i][k] - scores2[i][k]));
    }
  }
  const bool fingerprint_ok =
      snap2->classifier->episodes().at(1).frozen_fingerprint == snap2->classifier->parameter_fingerprint(1);
  return {{"episode1_sha256_before", hash1},
          {"episode1_sha256_after", hash2},
          {"checkpoint1_unchanged", ckpt1 == wb.checkpoint_bytes(0)},
          {"episode2_fingerprint_matches", fingerprint_ok},
          {"eval_proposals", scores1.size()},
          {"max_score_diff", max_diff},
          {"pass", hash1 == hash2 && max_diff <= 1e-9 && fingerprint_ok},
          {"seconds", seconds_since(t0)}};
}

struct PersistenceOptions {
  std::filesystem::path work_dir;
  std::uint64_t seed = 0;
  std::size_t sessions = 20;
};

namespace detail {

// Random session traffic followed by a simulated crash: expected state goes to
// expected.json, a torn half-line is appended to one event log and the process
// ends without running destructors.
[[noreturn]] inline void persistence_child(const ServiceConfig& cfg, const std::filesystem::path& manifest,
                                           const PersistenceOptions& o) {
  int code = 0;
  try {
    Workbench wb(cfg);
    wb.ingest(manifest);
    Rng rng(derive_seed(o.seed, 0x9e55));
    std::vector<std::string> finalized;
    for (std::size_t i = 0; i < o.sessions; ++i) {
      auto s = wb.create_session("object " + std::to_string(i));
      std::vector<std::size_t> pick;
      for (std::size_t p = 0; p < s.phrases.phrases.size(); ++p) {
        if (rng.uniform() < 0.4) pick.push_back(p);
      }
      if (pick.empty() && rng.uniform() < 0.8) pick.push_back(0);
      wb.select_session_phrases(s.id, pick, s.version);
      if (rng.uniform() < 0.5) {
        ThresholdRanges r = s.ranges;
        r.simple.lo = std::min(r.simple.hi, r.simple.lo + 0.05 * rng.uniform());
        r.hard.hi = std::max(r.hard.lo, r.hard.hi - 0.05 * rng.uniform());
        s = wb.set_session_ranges(s.id, r);
      }
      s = wb.session(s.id);
      std::vector<std::string> del, keep;
      for (const auto& id : s.simple_candidates()) {
        if (rng.uniform() < 0.3) del.push_back(id);
      }
      for (const auto& id : s.hard_candidates()) {
        if (rng.uniform() < 0.5) keep.push_back(id);
      }
      wb.annotate(s.id, AnnotationMode::kDelete, del);
      s = wb.annotate(s.id, AnnotationMode::kReserve, keep);
      const bool can_finalize = !s.phrases.selected_phrases().empty() &&
                                !(s.accepted_simple_ids.empty() && s.accepted_hard_ids.empty());
      if (can_finalize && rng.uniform() < 0.7) {
        wb.finalize_session(s.id);
        finalized.push_back(s.id);
      }
    }
    // Two episodes from the finalized sessions, two sessions each.
    for (std::size_t e = 0; e < 2 && finalized.size() >= 2 * (e + 1); ++e) {
      TrainRequest req;
      req.session_ids = {finalized[2 * e], finalized[2 * e + 1]};
      req.hyperparams = cfg.train;
      req.hyperparams.epochs = 3;
      wb.train(req);
    }
    nlohmann::json expected = {{"sessions", nlohmann::json::object()}, {"checkpoints", nlohmann::json::array()}};
    for (const auto& s : wb.sessions()) expected["sessions"][s.id] = nlohmann::json(s).dump();
    const auto episodes = wb.snapshot()->classifier->episodes().size();
    for (std::size_t t = 0; t < episodes; ++t) expected["checkpoints"].push_back(to_hex(sha256(wb.checkpoint_bytes(t))));
    write_file_atomic(o.work_dir / "expected.json", expected.dump());
    const auto victim = wb.sessions().back().id;
    std::ofstream torn(std::filesystem::path(cfg.data_dir) / "sessions" / (victim + ".events.jsonl"), std::ios::app);
    torn << R"({"type":"annotated","mode":"del)";
    torn.flush();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "persistence child: %s\n", e.what());
    code = 1;
  }
  std::fflush(nullptr);
  _exit(code);
}

}  // namespace detail

// Crash-restart round trip: a child process drives random sessions and two
// training episodes, then dies mid-append; a fresh Workbench on the same data
// directory must reproduce every session and checkpoint byte for byte.
inline nlohmann::json run_persistence(const PersistenceOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  std::filesystem::remove_all(o.work_dir);
  SyntheticSpec spec;
  spec.labels = {"airplane", "bicycle", "bird", "boat", "zebra", "giraffe"};
  spec.train_per_class = 40;
  spec.eval_per_class = 5;
  spec.seed = o.seed;
  MockProvider mock;
  HashTextEncoder text(spec.dim);
  const auto manifest = write_corpus(make_corpus(spec, text, mock), o.work_dir / "corpus");
  ServiceConfig cfg;
  cfg.backend = "file";
  cfg.data_dir = (o.work_dir / "data").string();
  cfg.t_threshold = 0.99;
  cfg.snapshot_every = 3;
  cfg.train.seed = o.seed;

  std::fflush(nullptr);
  const pid_t pid = fork();
  if (pid < 0) throw StateError("fork failed");
  if (pid == 0) detail::persistence_child(cfg, manifest, o);
  int status = 0;
  waitpid(pid, &status, 0);
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) throw StateError("persistence child failed");

  std::ifstream f(o.work_dir / "expected.json");
  const auto expected = nlohmann::json::parse(f);
  Workbench wb(cfg);
  std::size_t sessions_equal = 0, checkpoints_equal = 0, files_equal = 0;
  std::vector<std::string> mismatches;
  for (const auto& s : wb.sessions()) {
    const auto it = expected["sessions"].find(s.id);
    if (it != expected["sessions"].end() && nlohmann::json(s).dump() == it->get<std::string>()) {
      ++sessions_equal;
    } else {
      mismatches.push_back(s.id);
    }
  }
  const auto& ck = expected["checkpoints"];
  const auto episodes = wb.snapshot()->classifier->episodes().size();
  for (std::size_t t = 0; t < ck.size() && t < episodes; ++t) {
    checkpoints_equal += to_hex(sha256(wb.checkpoint_bytes(t))) == ck[t].get<std::string>();
    const auto on_disk = read_file_bytes(checkpoint_path(std::filesystem::path(cfg.data_dir) / "checkpoints",
                                                         wb.snapshot()->classifier->episodes()[t].id));
    files_equal += to_hex(sha256(std::string(on_disk.begin(), on_disk.end()))) == ck[t].get<std::string>();
  }
  const std::size_t n_sessions = expected["sessions"].size();
  const bool pass = n_sessions == o.sessions && wb.sessions().size() == n_sessions && sessions_equal == n_sessions &&
                    ck.size() == 2 && episodes == ck.size() && checkpoints_equal == ck.size() &&
                    files_equal == ck.size();
  return {{"sessions", n_sessions},
          {"sessions_equal", sessions_equal},
          {"mismatched_sessions", mismatches},
          {"episodes", ck.size()},
          {"checkpoints_equal", checkpoints_equal},
          {"checkpoint_files_equal", files_equal},
          {"pass", pass},
          {"seconds", seconds_since(t0)}};
}

}  // namespace owclip
