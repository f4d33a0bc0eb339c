#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "owclip/error.hpp"
#include "owclip/phrase_gen.hpp"
#include "owclip/refinement.hpp"

namespace owclip {

enum class SessionState { kOpen, kFinalized };

inline std::string to_string(SessionState s) { return s == SessionState::kOpen ? "open" : "finalized"; }

inline SessionState parse_session_state(const std::string& s) {
  if (s == "open") return SessionState::kOpen;
  if (s == "finalized") return SessionState::kFinalized;
  throw FormatError("unknown session state '" + s + "'");
}

// One class being curated: its phrases, the scored unknown pool it was opened
// on, the current threshold ranges and the accepted Simple/Hard images.
// Every change goes through `apply_event`, so replaying the event log
// rebuilds the same state.
struct AnnotationSession {
  std::string id;
  std::string class_label;
  PhraseList phrases;
  ThresholdRanges ranges;
  std::vector<SimilarityRecord> records;
  std::vector<std::string> accepted_simple_ids;
  std::vector<std::string> accepted_hard_ids;
  SessionState state = SessionState::kOpen;
  std::uint64_t version = 0;
  std::uint64_t seq = 0;  // events applied
  std::optional<int> trained_episode;
  std::string provider;
  int llm_attempts = 1;

  std::vector<std::string> simple_candidates(std::optional<ScoreRange> r = {}) const {
    return filter_candidates(records, r.value_or(ranges.simple));
  }
  std::vector<std::string> hard_candidates(std::optional<ScoreRange> r = {}) const {
    return filter_candidates(records, r.value_or(ranges.hard));
  }
};

inline void to_json(nlohmann::json& j, const AnnotationSession& s) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : s.records) records.push_back({r.proposal_id, r.score, r.relative_score});
  j = {{"session_id", s.id},
       {"class_label", s.class_label},
       {"phrase_list", s.phrases},
       {"threshold_ranges", s.ranges},
       {"records", records},
       {"accepted_simple_ids", s.accepted_simple_ids},
       {"accepted_hard_ids", s.accepted_hard_ids},
       {"state", to_string(s.state)},
       {"version", s.version},
       {"seq", s.seq},
       {"trained_episode", s.trained_episode ? nlohmann::json(*s.trained_episode) : nlohmann::json()},
       {"provider", s.provider},
       {"llm_attempts", s.llm_attempts}};
}

inline void from_json(const nlohmann::json& j, AnnotationSession& s) {
  s.id = j.at("session_id").get<std::string>();
  s.class_label = j.at("class_label").get<std::string>();
  s.phrases = j.at("phrase_list").get<PhraseList>();
  s.ranges = j.at("threshold_ranges").get<ThresholdRanges>();
  s.records.clear();
  for (const auto& r : j.at("records")) {
    s.records.push_back({r.at(0).get<std::string>(), r.at(1).get<double>(), r.at(2).get<double>()});
  }
  s.accepted_simple_ids = j.at("accepted_simple_ids").get<std::vector<std::string>>();
  s.accepted_hard_ids = j.at("accepted_hard_ids").get<std::vector<std::string>>();
  s.state = parse_session_state(j.at("state").get<std::string>());
  s.version = j.at("version").get<std::uint64_t>();
  s.seq = j.at("seq").get<std::uint64_t>();
  s.trained_episode.reset();
  if (!j.at("trained_episode").is_null()) s.trained_episode = j["trained_episode"].get<int>();
  s.provider = j.value("provider", "");
  s.llm_attempts = j.value("llm_attempts", 1);
}

// Short summary for listings and API replies.
inline nlohmann::json session_summary(const AnnotationSession& s) {
  return {{"session_id", s.id},
          {"class_label", s.class_label},
          {"state", to_string(s.state)},
          {"version", s.version},
          {"selected_phrases", s.phrases.selected_phrases().size()},
          {"accepted_simple", s.accepted_simple_ids.size()},
          {"accepted_hard", s.accepted_hard_ids.size()},
          {"pool_size", s.records.size()},
          {"threshold_ranges", s.ranges},
          {"trained_episode", s.trained_episode ? nlohmann::json(*s.trained_episode) : nlohmann::json()}};
}

inline void require_open(const AnnotationSession& s) {
  if (s.state != SessionState::kOpen) throw StateError("session " + s.id + " is finalized");
}

// Builds the first event of a session.
inline nlohmann::json created_event(const AnnotationSession& initial) {
  return {{"type", "created"}, {"session", initial}};
}

// Validates `event` against the current state and applies it. Mutating events
// bump the version; the "trained" bookkeeping event does not.
inline void apply_event(AnnotationSession& s, const nlohmann::json& event) {
  const std::string type = event.at("type").get<std::string>();
  if (type == "created") {
    if (s.seq != 0) throw StateError("session already created");
    s = event.at("session").get<AnnotationSession>();
    s.seq = 1;
    return;
  }
  if (s.seq == 0) throw StateError("session event before creation");
  if (type == "phrases_selected") {
    require_open(s);
    s.phrases = select_phrases(s.phrases, event.at("indices").get<std::vector<std::size_t>>());
  } else if (type == "ranges_set") {
    require_open(s);
    auto r = event.at("ranges").get<ThresholdRanges>();
    r.validate();
    s.ranges = r;
  } else if (type == "annotated") {
    require_open(s);
    if (event.contains("ranges")) {
      auto r = event["ranges"].get<ThresholdRanges>();
      r.validate();
      s.ranges = r;
    }
    const auto mode = parse_annotation_mode(event.at("mode").get<std::string>());
    const auto ids = event.at("ids").get<std::vector<std::string>>();
    if (mode == AnnotationMode::kDelete) {
      s.accepted_simple_ids = apply_annotation(s.simple_candidates(), ids, mode);
    } else {
      s.accepted_hard_ids = apply_annotation(s.hard_candidates(), ids, mode);
    }
  } else if (type == "finalized") {
    require_open(s);
    if (s.phrases.selected_phrases().empty()) {
      throw NoPhrasesError("session " + s.id + " has no selected phrase");
    }
    if (s.accepted_simple_ids.empty() && s.accepted_hard_ids.empty()) {
      throw InputError("session " + s.id + " has no accepted image");
    }
    s.state = SessionState::kFinalized;
  } else if (type == "trained") {
    if (s.state != SessionState::kFinalized) throw StateError("session " + s.id + " is not finalized");
    if (s.trained_episode) throw ConflictError("session " + s.id + " was already trained");
    s.trained_episode = event.at("episode_id").get<int>();
    ++s.seq;
    return;
  } else {
    throw FormatError("unknown session event '" + type + "'");
  }
  ++s.version;
  ++s.seq;
}

// Atomic replace: write a sibling temp file, then rename over the target.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw StateError("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) throw StateError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

// Per-session append-only JSONL event log plus a JSON snapshot written every
// `snapshot_every` events. Loading takes the snapshot and replays the later
// events. A torn final line (crash during append) is truncated away.
class SessionStore {
 public:
  SessionStore(std::filesystem::path dir, std::size_t snapshot_every)
      : dir_(std::move(dir)), snapshot_every_(snapshot_every) {
    std::filesystem::create_directories(dir_);
  }

  const std::filesystem::path& dir() const { return dir_; }

  std::filesystem::path log_path(const std::string& id) const { return dir_ / (id + ".events.jsonl"); }
  std::filesystem::path snapshot_path(const std::string& id) const { return dir_ / (id + ".snapshot.json"); }

  // Applies `event` to a copy of `s`; on success appends it and commits the copy.
  void commit(AnnotationSession& s, nlohmann::json event) {
    AnnotationSession next = s;
    apply_event(next, event);
    event["seq"] = next.seq;
    event["version"] = next.version;
    {
      std::ofstream f(log_path(next.id), std::ios::app | std::ios::binary);
      if (!f) throw StateError("cannot append to " + log_path(next.id).string());
      f << event.dump() << "\n";
      f.flush();
      if (!f) throw StateError("short write to " + log_path(next.id).string());
    }
    if (next.seq % snapshot_every_ == 0 || event.at("type") == "finalized") snapshot(next);
    s = std::move(next);
  }

  void snapshot(const AnnotationSession& s) const {
    write_file_atomic(snapshot_path(s.id), nlohmann::json(s).dump() + "\n");
  }

  AnnotationSession load(const std::string& id) const {
    AnnotationSession s;
    if (std::filesystem::exists(snapshot_path(id))) {
      std::ifstream f(snapshot_path(id));
      try {
        s = nlohmann::json::parse(f).get<AnnotationSession>();
      } catch (const nlohmann::json::exception& e) {
        throw FormatError("session snapshot " + id + ": " + e.what());
      }
    }
    std::ifstream f(log_path(id), std::ios::binary);
    if (!f) throw FormatError("session " + id + " has no event log");
    const std::string all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    while (pos < all.size()) {
      const auto nl = all.find('\n', pos);
      if (nl == std::string::npos) {
        // Torn tail; cut it so later appends start on a clean line.
        std::filesystem::resize_file(log_path(id), pos);
        break;
      }
      const std::string line = all.substr(pos, nl - pos);
      pos = nl + 1;
      nlohmann::json ev;
      try {
        ev = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw FormatError("session " + id + " event log is corrupt: " + e.what());
      }
      const auto seq = ev.at("seq").get<std::uint64_t>();
      if (seq <= s.seq) continue;
      if (seq != s.seq + 1) throw FormatError("session " + id + " event log skips seq " + std::to_string(s.seq + 1));
      apply_event(s, ev);
    }
    if (s.seq == 0) throw FormatError("session " + id + " has no creation event");
    return s;
  }

  std::vector<std::string> list_ids() const {
    std::vector<std::string> ids;
    for (const auto& e : std::filesystem::directory_iterator(dir_)) {
      const auto name = e.path().filename().string();
      const std::string suffix = ".events.jsonl";
      if (name.size() > suffix.size() && name.ends_with(suffix)) ids.push_back(name.substr(0, name.size() - suffix.size()));
    }
    std::sort(ids.begin(), ids.end());
    return ids;
  }

  std::map<std::string, AnnotationSession> load_all() const {
    std::map<std::string, AnnotationSession> out;
    for (const auto& id : list_ids()) out.emplace(id, load(id));
    return out;
  }

 private:
  std::filesystem::path dir_;
  std::size_t snapshot_every_;
};

}  // namespace owclip
