#pragma once

#include <memory>
#include <string>
#include <thread>

#include "owclip/detail/httplib.hpp"
#include <spdlog/spdlog.h>

#include "owclip/api.hpp"
#include "owclip/error.hpp"

namespace owclip {

inline std::string content_type_for(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".png") return "image/png";
  if (ext == ".txt") return "text/plain";
  return "application/octet-stream";
}

// JSON-over-HTTP front of an Api. The port is bound in the constructor so a
// busy port surfaces as StartupError before anything else starts.
class HttpServer {
 public:
  HttpServer(Workbench& wb, const std::string& host, int port) : api_(wb) {
    auto handler = [this](const httplib::Request& req, httplib::Response& res) {
      ApiRequest r{req.method, req.path, {}, req.body};
      for (const auto& [k, v] : req.params) r.query[k] = v;
      const auto out = api_.handle(r);
      res.status = out.status;
      res.set_content(out.body.dump(), "application/json");
      spdlog::debug("{} {} -> {}", req.method, req.path, out.status);
    };
    // Thumbnails for the annotation grid: raw bytes of the proposal's image.
    srv_.Get("/images/(.+)", [this, &wb](const httplib::Request& req, httplib::Response& res) {
      try {
        const auto path = wb.image_file(req.matches[1]);
        const auto bytes = read_file_bytes(path);
        res.set_content(std::string(bytes.begin(), bytes.end()), content_type_for(path));
      } catch (const Error& e) {
        const auto out = error_response(e.kind(), e.what());
        res.status = out.status;
        res.set_content(out.body.dump(), "application/json");
      }
    });
    // The library default adds SO_REUSEPORT, which lets a second server share
    // a busy port silently; keep only SO_REUSEADDR.
    srv_.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
    });
    srv_.Get(".*", handler);
    srv_.Post(".*", handler);
    if (port == 0) {
      port_ = srv_.bind_to_any_port(host);
      if (port_ <= 0) throw StartupError("cannot bind " + host);
    } else {
      if (!srv_.bind_to_port(host, port)) {
        throw StartupError("cannot bind " + host + ":" + std::to_string(port) + " (port busy?)");
      }
      port_ = port;
    }
  }

  ~HttpServer() { stop(); }

  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  int port() const { return port_; }

  // Serves on the calling thread until stop().
  void run() {
    spdlog::info("listening on port {}", port_);
    srv_.listen_after_bind();
  }

  void start() {
    thread_ = std::thread([this] { run(); });
    srv_.wait_until_ready();
  }

  void stop() {
    srv_.stop();
    if (thread_.joinable()) thread_.join();
  }

 private:
  Api api_;
  httplib::Server srv_;
  int port_ = 0;
  std::thread thread_;
};

// Client side: sends ApiRequests to a running server, e.g. "http://127.0.0.1:8080".
class HttpTransport {
 public:
  explicit HttpTransport(const std::string& url) : cli_(std::make_shared<httplib::Client>(url)) {
    if (!cli_->is_valid()) throw ConfigError("invalid server url '" + url + "'");
    cli_->set_read_timeout(600, 0);
  }

  ApiResponse operator()(const ApiRequest& req) const {
    httplib::Params params(req.query.begin(), req.query.end());
    httplib::Result res;
    if (req.method == "GET") {
      res = cli_->Get(req.path, params, httplib::Headers{});
    } else if (req.method == "POST") {
      const auto path = params.empty() ? req.path : httplib::append_query_params(req.path, params);
      res = cli_->Post(path, req.body, "application/json");
    } else {
      throw InputError("unsupported method " + req.method);
    }
    if (!res) throw StartupError("request " + req.method + " " + req.path + " failed: " + httplib::to_string(res.error()));
    ApiResponse out;
    out.status = res->status;
    out.body = res->body.empty() ? nlohmann::json() : nlohmann::json::parse(res->body, nullptr, false);
    return out;
  }

 private:
  std::shared_ptr<httplib::Client> cli_;
};

}  // namespace owclip
