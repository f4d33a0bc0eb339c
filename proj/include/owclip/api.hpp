#pragma once

#include <charconv>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "owclip/error.hpp"
#include "owclip/workbench.hpp"

namespace owclip {

struct ApiRequest {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::string body;
};

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

// HTTP status for each library error kind.
inline int status_for(const std::string& kind) {
  static const std::map<std::string, int> codes = {
      {"InputError", 400},     {"RangeError", 400},    {"ParseError", 400},    {"IngestError", 400},
      {"DimensionError", 400}, {"ConfigError", 400},   {"FormatError", 400},   {"NotFoundError", 404},
      {"ConflictError", 409},  {"StateError", 409},    {"BusyError", 409},     {"NoPhrasesError", 409},
      {"GuardError", 422},     {"NumericsError", 422}, {"ProviderError", 502}, {"StartupError", 500}};
  auto it = codes.find(kind);
  return it == codes.end() ? 500 : it->second;
}

inline ApiResponse error_response(const std::string& kind, const std::string& message) {
  return {status_for(kind), {{"error", kind}, {"message", message}}};
}

// Exact decimal parsing; "0.3349" arrives as the nearest double, unrounded.
inline double parse_number(const std::string& name, const std::string& v) {
  double d = 0.0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, d);
  if (ec != std::errc() || ptr != end || !std::isfinite(d)) {
    throw InputError("parameter '" + name + "' is not a number: '" + v + "'");
  }
  return d;
}

inline std::uint64_t parse_count(const std::string& name, const std::string& v) {
  std::uint64_t n = 0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, n);
  if (ec != std::errc() || ptr != end) throw InputError("parameter '" + name + "' is not a non-negative integer");
  return n;
}

inline bool parse_flag(const std::string& v) { return v == "1" || v == "true" || v == "yes"; }

inline nlohmann::json records_json(const AnnotationSession& s, const std::vector<std::string>& ids) {
  std::unordered_map<std::string, const SimilarityRecord*> by_id;
  for (const auto& r : s.records) by_id[r.proposal_id] = &r;
  auto out = nlohmann::json::array();
  for (const auto& id : ids) out.push_back(*by_id.at(id));
  return out;
}

// Routes requests to a Workbench. Shared by the HTTP server and the CLI so
// both speak the same JSON.
class Api {
 public:
  explicit Api(Workbench& wb) : wb_(wb) {}

  ApiResponse handle(const ApiRequest& req) {
    try {
      return dispatch(req);
    } catch (const Error& e) {
      return error_response(e.kind(), e.what());
    } catch (const nlohmann::json::exception& e) {
      return error_response("InputError", std::string("malformed request body: ") + e.what());
    } catch (const std::exception& e) {
      spdlog::error("{} {}: {}", req.method, req.path, e.what());
      return error_response("InternalError", e.what());
    }
  }

 private:
  static nlohmann::json body_json(const ApiRequest& req) {
    if (req.body.empty()) return nlohmann::json::object();
    auto j = nlohmann::json::parse(req.body);
    if (!j.is_object()) throw InputError("request body must be a JSON object");
    return j;
  }

  static std::optional<std::string> q(const ApiRequest& req, const std::string& key) {
    auto it = req.query.find(key);
    if (it == req.query.end() || it->second.empty()) return std::nullopt;
    return it->second;
  }

  static std::optional<std::uint64_t> version_of(const nlohmann::json& b) {
    if (!b.contains("version") || b["version"].is_null()) return std::nullopt;
    return b["version"].get<std::uint64_t>();
  }

  ProjectionRequest projection_request(const ApiRequest& req, const nlohmann::json* body = nullptr) const {
    const auto& d = wb_.config().projection;
    ProjectionRequest p;
    p.method = parse_projection_method(d.method);
    p.seed = d.seed;
    p.kmin = d.kmin;
    p.kmax = d.kmax;
    auto pick = [&](const std::string& key) -> std::optional<std::string> {
      if (body && body->contains(key)) {
        const auto& v = (*body)[key];
        return v.is_string() ? v.get<std::string>() : v.dump();
      }
      return q(req, key);
    };
    if (auto v = pick("method")) p.method = parse_projection_method(*v);
    if (auto v = pick("seed")) p.seed = parse_count("seed", *v);
    if (auto v = pick("kmin")) p.kmin = parse_count("kmin", *v);
    if (auto v = pick("kmax")) p.kmax = parse_count("kmax", *v);
    return p;
  }

  std::optional<ThresholdRanges> query_ranges(const ApiRequest& req, const AnnotationSession& s) const {
    const auto ls = q(req, "ls"), hs = q(req, "hs"), lh = q(req, "lh"), hh = q(req, "hh");
    if (!ls && !hs && !lh && !hh) return std::nullopt;
    ThresholdRanges r = s.ranges;
    if (ls) r.simple.lo = parse_number("ls", *ls);
    if (hs) r.simple.hi = parse_number("hs", *hs);
    if (lh) r.hard.lo = parse_number("lh", *lh);
    if (hh) r.hard.hi = parse_number("hh", *hh);
    r.validate();
    return r;
  }

  nlohmann::json candidates_json(const AnnotationSession& s, const ThresholdRanges& r) const {
    const auto simple = s.simple_candidates(r.simple);
    const auto hard = s.hard_candidates(r.hard);
    return {{"session_id", s.id},
            {"threshold_ranges", r},
            {"pool_size", s.records.size()},
            {"simple_count", simple.size()},
            {"hard_count", hard.size()},
            {"simple", records_json(s, simple)},
            {"hard", records_json(s, hard)}};
  }

  nlohmann::json session_json(const AnnotationSession& s) const {
    auto j = session_summary(s);
    j["phrase_list"] = s.phrases;
    j["accepted_simple_ids"] = s.accepted_simple_ids;
    j["accepted_hard_ids"] = s.accepted_hard_ids;
    return j;
  }

  ApiResponse session_route(const ApiRequest& req, const std::string& id, const std::string& rest) {
    const bool get = req.method == "GET", post = req.method == "POST";
    if (rest.empty() && get) return {200, session_json(wb_.session(id))};
    if (rest == "/phrases" && get) {
      auto s = wb_.session(id);
      return {200, {{"session_id", id}, {"version", s.version}, {"phrase_list", s.phrases}}};
    }
    if (rest == "/phrases/select" && post) {
      const auto b = body_json(req);
      std::vector<std::size_t> idx;
      if (b.value("all", false)) {
        const auto s = wb_.session(id);
        for (std::size_t i = 0; i < s.phrases.phrases.size(); ++i) idx.push_back(i);
      } else {
        idx = b.at("indices").get<std::vector<std::size_t>>();
      }
      const auto s = wb_.select_session_phrases(id, idx, version_of(b));
      return {200, {{"session_id", id}, {"version", s.version}, {"phrase_list", s.phrases}}};
    }
    if (rest == "/candidates" && get) {
      const auto s = wb_.session(id);
      return {200, candidates_json(s, query_ranges(req, s).value_or(s.ranges))};
    }
    if (rest == "/ranges" && post) {
      const auto b = body_json(req);
      const auto s = wb_.set_session_ranges(id, b.get<ThresholdRanges>(), version_of(b));
      return {200, candidates_json(s, s.ranges)};
    }
    if (rest == "/density" && get) {
      const auto s = wb_.session(id);
      std::optional<double> bw;
      if (auto v = q(req, "bandwidth")) bw = parse_number("bandwidth", *v);
      const auto r = query_ranges(req, s).value_or(s.ranges);
      auto curve_of = [&](const std::vector<std::string>& ids) -> nlohmann::json {
        if (ids.empty()) return nullptr;
        std::unordered_map<std::string, double> score;
        for (const auto& rec : s.records) score[rec.proposal_id] = rec.score;
        std::vector<double> v;
        for (const auto& i : ids) v.push_back(score.at(i));
        return density_curve(v, bw);
      };
      return {200,
              {{"session_id", id},
               {"threshold_ranges", r},
               {"pool", density_curve(s.records, bw)},
               {"simple", curve_of(s.simple_candidates(r.simple))},
               {"hard", curve_of(s.hard_candidates(r.hard))}}};
    }
    if (rest == "/annotate" && post) {
      const auto b = body_json(req);
      std::optional<ThresholdRanges> ranges;
      if (b.contains("ranges")) ranges = b["ranges"].get<ThresholdRanges>();
      const auto s = wb_.annotate(id, parse_annotation_mode(b.at("mode").get<std::string>()),
                                  b.value("ids", std::vector<std::string>{}), ranges, version_of(b));
      return {200, session_json(s)};
    }
    if (rest == "/finalize" && post) {
      const auto b = body_json(req);
      return {200, session_json(wb_.finalize_session(id, version_of(b)))};
    }
    throw NotFoundError("no route " + req.method + " " + req.path);
  }

  ApiResponse dispatch(const ApiRequest& req) {
    const auto& m = req.method;
    const auto& p = req.path;
    if (m == "GET" && p == "/health") return {200, {{"status", "ok"}}};
    if (m == "POST" && p == "/ingest") {
      const auto b = body_json(req);
      std::optional<std::filesystem::path> emb;
      if (b.contains("embeddings_path")) emb = b["embeddings_path"].get<std::string>();
      return {200, wb_.ingest(b.at("manifest_path").get<std::string>(), emb)};
    }
    if (m == "GET" && p == "/pool/unknown") return {200, wb_.unknown_pool_json()};
    if (m == "GET" && p == "/projection") {
      const bool wait = q(req, "wait") && parse_flag(*q(req, "wait"));
      auto j = wb_.projection(projection_request(req), wait);
      const int status = j.at("status") == "running" ? 202 : 200;
      return {status, j};
    }
    if (m == "POST" && p == "/lasso") {
      const auto b = body_json(req);
      std::vector<Point2> poly;
      for (const auto& v : b.at("polygon")) poly.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
      const auto ids = wb_.lasso(projection_request(req, &b), poly);
      return {200, {{"count", ids.size()}, {"ids", ids}}};
    }
    if (m == "GET" && p.starts_with("/related/")) {
      const std::string id = p.substr(9);
      std::size_t k = kDefaultRelatedK;
      if (auto v = q(req, "k")) k = parse_count("k", *v);
      auto items = nlohmann::json::array();
      for (const auto& r : wb_.related(id, k)) items.push_back({{"proposal_id", r.proposal_id}, {"score", r.score}});
      return {200, {{"query", id}, {"k", k}, {"items", items}}};
    }
    if (p == "/sessions") {
      if (m == "POST") {
        const auto b = body_json(req);
        const auto s = wb_.create_session(b.at("label").get<std::string>());
        auto j = session_json(s);
        j["candidates"] = candidates_json(s, s.ranges);
        return {201, j};
      }
      if (m == "GET") {
        auto list = nlohmann::json::array();
        for (const auto& s : wb_.sessions()) list.push_back(session_summary(s));
        return {200, {{"sessions", list}}};
      }
    }
    if (p.starts_with("/sessions/")) {
      const auto tail = p.substr(10);
      const auto slash = tail.find('/');
      const std::string id = tail.substr(0, slash);
      return session_route(req, id, slash == std::string::npos ? std::string() : tail.substr(slash));
    }
    if (m == "POST" && p == "/train") {
      const auto b = body_json(req);
      TrainRequest tr;
      tr.session_ids = b.at("session_ids").get<std::vector<std::string>>();
      tr.hyperparams = wb_.config().train;
      if (b.contains("hyperparams")) from_json(b["hyperparams"], tr.hyperparams);
      tr.ablation = parse_ablation(b.value("ablation", std::string("full")));
      if (b.value("async", false)) return {202, wb_.train_async(tr)};
      return {200, wb_.train(tr)};
    }
    if (m == "GET" && p == "/train/status") return {200, wb_.train_status()};
    if (m == "GET" && p == "/eval") return {200, wb_.evaluate()};
    if (m == "GET" && p == "/classes") return {200, wb_.classes_json()};
    throw NotFoundError("no route " + m + " " + p);
  }

  Workbench& wb_;
};

}  // namespace owclip
