#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "owclip/crop_smoothing.hpp"
#include "owclip/error.hpp"
#include "owclip/llm_http.hpp"
#include "owclip/prompt_tuner.hpp"

namespace owclip {

struct ProjectionDefaults {
  std::string method = "tsne";
  std::uint64_t seed = 0;
  std::size_t kmin = 2;
  std::size_t kmax = 10;
};

inline void to_json(nlohmann::json& j, const ProjectionDefaults& p) {
  j = {{"method", p.method}, {"seed", p.seed}, {"kmin", p.kmin}, {"kmax", p.kmax}};
}

inline void from_json(const nlohmann::json& j, ProjectionDefaults& p) {
  p.method = j.value("method", p.method);
  p.seed = j.value("seed", p.seed);
  p.kmin = j.value("kmin", p.kmin);
  p.kmax = j.value("kmax", p.kmax);
}

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string data_dir = "owclip-data";
  std::string backend = "toy";  // toy | file
  std::size_t embedding_dim = 16;
  std::uint64_t encoder_seed = 7;
  std::size_t prompt_length = 10;
  double temperature = 0.07;
  double t_threshold = 0.5;
  std::size_t n_phrases = 10;
  std::size_t snapshot_every = 5;
  std::string log_level = "info";
  CropSmoothingConfig crop;
  EpisodeHyperparams train;
  LlmConfig llm;
  ProjectionDefaults projection;

  void validate() const {
    if (port < 0 || port > 65535) throw ConfigError("port must be in [0, 65535]");
    if (data_dir.empty()) throw ConfigError("data_dir must not be empty");
    if (backend != "toy" && backend != "file") throw ConfigError("backend must be 'toy' or 'file'");
    if (embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
    if (backend == "toy" && embedding_dim != 16) throw ConfigError("the toy backend has embedding_dim 16");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (!(t_threshold > 0.0 && t_threshold < 1.0)) throw ConfigError("t_threshold must be in (0, 1)");
    if (n_phrases == 0 || n_phrases > kMaxPhraseCount) throw ConfigError("n_phrases must be in [1, 50]");
    if (snapshot_every == 0) throw ConfigError("snapshot_every must be positive");
    if (projection.kmin < 2 || projection.kmax < projection.kmin) throw ConfigError("projection needs 2 <= kmin <= kmax");
    crop.validate();
    train.validate();
  }
};

inline void to_json(nlohmann::json& j, const ServiceConfig& c) {
  j = {{"host", c.host},
       {"port", c.port},
       {"data_dir", c.data_dir},
       {"backend", c.backend},
       {"embedding_dim", c.embedding_dim},
       {"encoder_seed", c.encoder_seed},
       {"prompt_length", c.prompt_length},
       {"temperature", c.temperature},
       {"t_threshold", c.t_threshold},
       {"n_phrases", c.n_phrases},
       {"snapshot_every", c.snapshot_every},
       {"log_level", c.log_level},
       {"crop", c.crop},
       {"train", c.train},
       {"llm", c.llm},
       {"projection", c.projection}};
}

inline void from_json(const nlohmann::json& j, ServiceConfig& c) {
  static const std::set<std::string> known = {"host",          "port",        "data_dir",    "backend",
                                              "embedding_dim", "encoder_seed", "prompt_length", "temperature",
                                              "t_threshold",   "n_phrases",   "snapshot_every", "log_level",
                                              "crop",          "train",       "llm",         "projection"};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  c.host = j.value("host", c.host);
  c.port = j.value("port", c.port);
  c.data_dir = j.value("data_dir", c.data_dir);
  c.backend = j.value("backend", c.backend);
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.encoder_seed = j.value("encoder_seed", c.encoder_seed);
  c.prompt_length = j.value("prompt_length", c.prompt_length);
  c.temperature = j.value("temperature", c.temperature);
  c.t_threshold = j.value("t_threshold", c.t_threshold);
  c.n_phrases = j.value("n_phrases", c.n_phrases);
  c.snapshot_every = j.value("snapshot_every", c.snapshot_every);
  c.log_level = j.value("log_level", c.log_level);
  if (j.contains("crop")) c.crop = j["crop"].get<CropSmoothingConfig>();
  if (j.contains("train")) c.train = j["train"].get<EpisodeHyperparams>();
  if (j.contains("llm")) c.llm = j["llm"].get<LlmConfig>();
  if (j.contains("projection")) c.projection = j["projection"].get<ProjectionDefaults>();
}

// OWCLIP_* variables override file values. The LLM API key is never read
// from the config; only the name of its variable is.
inline void apply_env_overrides(ServiceConfig& c) {
  auto env = [](const char* name) -> const char* {
    const char* v = std::getenv(name);
    return v && *v ? v : nullptr;
  };
  auto num = [](const char* name, const char* v) {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != std::string(v).size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError(std::string(name) + " is not a number: " + v);
    }
  };
  if (auto v = env("OWCLIP_HOST")) c.host = v;
  if (auto v = env("OWCLIP_PORT")) c.port = static_cast<int>(num("OWCLIP_PORT", v));
  if (auto v = env("OWCLIP_DATA_DIR")) c.data_dir = v;
  if (auto v = env("OWCLIP_BACKEND")) c.backend = v;
  if (auto v = env("OWCLIP_TEMPERATURE")) c.temperature = num("OWCLIP_TEMPERATURE", v);
  if (auto v = env("OWCLIP_T_THRESHOLD")) c.t_threshold = num("OWCLIP_T_THRESHOLD", v);
  if (auto v = env("OWCLIP_EPSILON_MIN")) c.crop.epsilon_min = num("OWCLIP_EPSILON_MIN", v);
  if (auto v = env("OWCLIP_D_HARD")) c.crop.d_hard = num("OWCLIP_D_HARD", v);
  if (auto v = env("OWCLIP_LLM_PROVIDER")) c.llm.provider = v;
  if (auto v = env("OWCLIP_LLM_ENDPOINT")) c.llm.endpoint = v;
  if (auto v = env("OWCLIP_LLM_MODEL")) c.llm.model = v;
  if (auto v = env("OWCLIP_LOG_LEVEL")) c.log_level = v;
}

// Defaults, then the optional file, then the environment.
inline ServiceConfig load_config(const std::optional<std::filesystem::path>& path) {
  ServiceConfig c;
  if (path) {
    std::ifstream f(*path);
    if (!f) throw ConfigError("cannot open config " + path->string());
    try {
      c = nlohmann::json::parse(f).get<ServiceConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + path->string() + ": " + e.what());
    }
  }
  apply_env_overrides(c);
  c.validate();
  return c;
}

}  // namespace owclip
