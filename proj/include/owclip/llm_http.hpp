#pragma once

#include <cstdlib>
#include <string>

#include "owclip/detail/httplib.hpp"
#include <nlohmann/json.hpp>

#include "owclip/error.hpp"
#include "owclip/phrase_gen.hpp"

namespace owclip {

struct LlmConfig {
  std::string provider = "mock";  // mock | http
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string model = "gpt-4o";
  std::string api_key_env = "OWCLIP_LLM_API_KEY";
  double timeout_s = 60.0;
};

inline void to_json(nlohmann::json& j, const LlmConfig& c) {
  j = {{"provider", c.provider},
       {"endpoint", c.endpoint},
       {"model", c.model},
       {"api_key_env", c.api_key_env},
       {"timeout_s", c.timeout_s}};
}

inline void from_json(const nlohmann::json& j, LlmConfig& c) {
  c.provider = j.value("provider", c.provider);
  c.endpoint = j.value("endpoint", c.endpoint);
  c.model = j.value("model", c.model);
  c.api_key_env = j.value("api_key_env", c.api_key_env);
  c.timeout_s = j.value("timeout_s", c.timeout_s);
}

struct ParsedUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

inline ParsedUrl split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ConfigError("endpoint URL has no scheme: " + url);
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

// OpenAI-style chat-completions client. The API key is read from the
// environment variable named in the config at call time.
class HttpChatProvider final : public LLMProvider {
 public:
  explicit HttpChatProvider(LlmConfig cfg) : cfg_(std::move(cfg)), url_(split_url(cfg_.endpoint)) {}

  std::string name() const override { return "http"; }

  std::string generate(const std::string& prompt) override {
    httplib::Client cli(url_.origin);
    const auto secs = static_cast<time_t>(cfg_.timeout_s);
    const auto usecs = static_cast<time_t>((cfg_.timeout_s - static_cast<double>(secs)) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    httplib::Headers headers;
    if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key) {
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    const nlohmann::json body = {{"model", cfg_.model},
                                 {"temperature", 0},
                                 {"messages", {{{"role", "user"}, {"content", prompt}}}}};
    auto res = cli.Post(url_.path, headers, body.dump(), "application/json");
    if (!res) throw ProviderError("LLM request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) {
      throw ProviderError("LLM endpoint returned HTTP " + std::to_string(res->status));
    }
    try {
      const auto j = nlohmann::json::parse(res->body);
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ProviderError(std::string("unexpected LLM response: ") + e.what());
    }
  }

 private:
  LlmConfig cfg_;
  ParsedUrl url_;
};

inline std::unique_ptr<LLMProvider> make_provider(const LlmConfig& cfg) {
  if (cfg.provider == "mock") return std::make_unique<MockProvider>();
  if (cfg.provider == "echo") return std::make_unique<EchoProvider>();
  if (cfg.provider == "http") return std::make_unique<HttpChatProvider>(cfg);
  throw ConfigError("unknown LLM provider '" + cfg.provider + "'");
}

}  // namespace owclip
