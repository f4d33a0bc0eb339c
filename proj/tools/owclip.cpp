// owclip: command-line front end. Every command except `serve`, `synth` and
// `bench` is an API call, sent to a running server with --url or executed
// in-process against the data directory.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "owclip/owclip.hpp"

using owclip::ApiRequest;
using owclip::ApiResponse;
using nlohmann::json;

namespace {

struct Globals {
  std::string config_path;
  std::string data_dir;
  std::string url;
  std::string log_level;
  bool compact = false;
};

owclip::ServiceConfig load(const Globals& g) {
  auto cfg = owclip::load_config(g.config_path.empty() ? std::nullopt
                                                       : std::optional<std::filesystem::path>(g.config_path));
  if (!g.data_dir.empty()) cfg.data_dir = g.data_dir;
  if (!g.log_level.empty()) cfg.log_level = g.log_level;
  cfg.validate();
  spdlog::set_level(spdlog::level::from_str(cfg.log_level));
  return cfg;
}

int emit(const ApiResponse& r, const Globals& g) {
  const auto text = g.compact ? r.body.dump() : r.body.dump(2);
  if (r.status >= 400) {
    std::cerr << text << "\n";
    return r.status == 404 ? 4 : r.status >= 500 ? 5 : 2;
  }
  std::cout << text << "\n";
  return 0;
}

ApiResponse call(const Globals& g, const ApiRequest& req) {
  if (!g.url.empty()) return owclip::HttpTransport(g.url)(req);
  const auto cfg = load(g);
  owclip::Workbench wb(cfg);
  owclip::Api api(wb);
  return api.handle(req);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, sep);) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

// "x,y;x,y;x,y" -> [[x,y],...]
json parse_polygon(const std::string& s) {
  json poly = json::array();
  for (const auto& v : split(s, ';')) {
    const auto xy = split(v, ',');
    if (xy.size() != 2) throw owclip::InputError("polygon vertex '" + v + "' is not x,y");
    poly.push_back({owclip::parse_number("x", xy[0]), owclip::parse_number("y", xy[1])});
  }
  return poly;
}

owclip::HttpServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

// Writes a synthetic corpus. The file backend gets a float32 embedding store;
// the toy backend gets one whitespace-separated descriptor file per proposal.
json write_synthetic(const std::filesystem::path& out, const std::string& backend, std::uint64_t seed,
                     std::size_t train, std::size_t eval, double spread) {
  owclip::SyntheticSpec spec;
  spec.labels = owclip::default_known_labels();
  for (const auto& l : owclip::default_unknown_labels()) spec.labels.push_back(l);
  spec.train_per_class = train;
  spec.eval_per_class = eval;
  spec.spread = spread;
  spec.seed = seed;
  owclip::MockProvider mock;
  owclip::HashTextEncoder text(spec.dim);
  const auto corpus = owclip::make_corpus(spec, text, mock);
  std::filesystem::path manifest;
  if (backend == "file") {
    manifest = owclip::write_corpus(corpus, out);
  } else if (backend == "toy") {
    std::filesystem::create_directories(out / "images");
    auto rows = corpus.rows;
    for (auto& r : rows) {
      r.image_path = "images/" + r.proposal_id + ".txt";
      std::ofstream f(out / r.image_path);
      f.precision(17);
      for (double v : *r.descriptor) f << v << "\n";
      r.descriptor.reset();
    }
    manifest = out / "manifest.jsonl";
    owclip::write_manifest(manifest, rows);
  } else {
    throw owclip::ConfigError("backend must be 'toy' or 'file'");
  }
  json phrases = json::object();
  for (const auto& k : corpus.classes) phrases[k.label] = k.true_phrases;
  return {{"manifest", manifest.string()}, {"proposals", corpus.rows.size()}, {"true_phrases", phrases}};
}

}  // namespace

int main(int argc, char** argv) {
  // Logs go to stderr; stdout carries the JSON replies.
  spdlog::set_default_logger(spdlog::stderr_color_mt("owclip"));
  CLI::App app{"Open-world annotation and incremental prompt-tuning workbench"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("-c,--config", g.config_path, "JSON config file");
  app.add_option("-d,--data-dir", g.data_dir, "data directory (overrides config)");
  app.add_option("-u,--url", g.url, "send commands to a running server, e.g. http://127.0.0.1:8080");
  app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error");
  app.add_flag("--compact", g.compact, "single-line JSON output");

  ApiRequest req;
  std::function<int()> action;
  auto api_action = [&] { action = [&] { return emit(call(g, req), g); }; };

  // serve
  auto* serve = app.add_subcommand("serve", "run the HTTP API");
  std::string host;
  int port = -1;
  serve->add_option("--host", host);
  serve->add_option("-p,--port", port);
  serve->callback([&] {
    action = [&] {
      auto cfg = load(g);
      if (!host.empty()) cfg.host = host;
      if (port >= 0) cfg.port = port;
      owclip::Workbench wb(cfg);
      owclip::HttpServer server(wb, cfg.host, cfg.port);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "listening on http://" << cfg.host << ":" << server.port() << std::endl;
      server.run();
      g_server = nullptr;
      return 0;
    };
  });

  // ingest
  auto* ingest = app.add_subcommand("ingest", "ingest a proposal manifest");
  std::string manifest, embeddings;
  ingest->add_option("manifest", manifest)->required();
  ingest->add_option("-e,--embeddings", embeddings, "embedding store (default: <manifest>.owemb)");
  ingest->callback([&] {
    json b = {{"manifest_path", std::filesystem::absolute(manifest).string()}};
    if (!embeddings.empty()) b["embeddings_path"] = std::filesystem::absolute(embeddings).string();
    req = {"POST", "/ingest", {}, b.dump()};
    api_action();
  });

  app.add_subcommand("pool", "list the unknown pool")->callback([&] {
    req = {"GET", "/pool/unknown", {}, ""};
    api_action();
  });

  // projection / lasso / related
  std::string method, seed, kmin, kmax;
  auto add_projection_opts = [&](CLI::App* sub) {
    sub->add_option("-m,--method", method, "tsne|pca");
    sub->add_option("--seed", seed);
    sub->add_option("--kmin", kmin);
    sub->add_option("--kmax", kmax);
  };
  auto projection_query = [&] {
    std::map<std::string, std::string> q;
    if (!method.empty()) q["method"] = method;
    if (!seed.empty()) q["seed"] = seed;
    if (!kmin.empty()) q["kmin"] = kmin;
    if (!kmax.empty()) q["kmax"] = kmax;
    return q;
  };
  auto* projection = app.add_subcommand("projection", "2-D projection and clusters of the unknown pool");
  bool no_wait = false;
  add_projection_opts(projection);
  projection->add_flag("--no-wait", no_wait, "return immediately while the job runs");
  projection->callback([&] {
    auto q = projection_query();
    q["wait"] = no_wait ? "0" : "1";
    req = {"GET", "/projection", q, ""};
    api_action();
  });

  auto* lasso = app.add_subcommand("lasso", "select pool items inside a polygon of the projection");
  std::string polygon;
  add_projection_opts(lasso);
  lasso->add_option("polygon", polygon, "x,y;x,y;x,y;...")->required();
  lasso->callback([&] {
    json b = {{"polygon", parse_polygon(polygon)}};
    for (const auto& [k, v] : projection_query()) b[k] = v;
    req = {"POST", "/lasso", {}, b.dump()};
    api_action();
  });

  auto* related = app.add_subcommand("related", "nearest pool items to a proposal");
  std::string related_id, related_k;
  related->add_option("proposal_id", related_id)->required();
  related->add_option("-k", related_k);
  related->callback([&] {
    std::map<std::string, std::string> q;
    if (!related_k.empty()) q["k"] = related_k;
    req = {"GET", "/related/" + related_id, q, ""};
    api_action();
  });

  // session ...
  auto* session = app.add_subcommand("session", "annotation sessions");
  session->require_subcommand(1);
  session->fallthrough();
  std::string sid, label, indices, ids, mode;
  std::optional<std::uint64_t> version;
  bool all_phrases = false;
  std::vector<double> ranges;
  auto with_version = [&](json b) {
    if (version) b["version"] = *version;
    return b;
  };
  auto* s_create = session->add_subcommand("create", "open a session for a new class");
  s_create->add_option("label", label)->required();
  s_create->callback([&] {
    req = {"POST", "/sessions", {}, json{{"label", label}}.dump()};
    api_action();
  });
  session->add_subcommand("list", "list sessions")->callback([&] {
    req = {"GET", "/sessions", {}, ""};
    api_action();
  });
  auto* s_show = session->add_subcommand("show", "show one session");
  s_show->add_option("session_id", sid)->required();
  s_show->callback([&] {
    req = {"GET", "/sessions/" + sid, {}, ""};
    api_action();
  });
  auto* s_select = session->add_subcommand("select", "select feature phrases by index");
  s_select->add_option("session_id", sid)->required();
  s_select->add_option("indices", indices, "comma-separated, e.g. 0,2,5");
  s_select->add_flag("--all", all_phrases);
  s_select->add_option("--version", version);
  s_select->callback([&] {
    json b = json::object();
    if (all_phrases) {
      b["all"] = true;
    } else {
      std::vector<std::size_t> idx;
      for (const auto& v : split(indices, ',')) idx.push_back(owclip::parse_count("index", v));
      b["indices"] = idx;
    }
    req = {"POST", "/sessions/" + sid + "/phrases/select", {}, with_version(b).dump()};
    api_action();
  });
  auto* s_cand = session->add_subcommand("candidates", "Simple and Hard candidates");
  s_cand->add_option("session_id", sid)->required();
  s_cand->add_option("--ranges", ranges, "ls hs lh hh")->expected(4);
  s_cand->callback([&] {
    std::map<std::string, std::string> q;
    if (ranges.size() == 4) {
      const char* keys[] = {"ls", "hs", "lh", "hh"};
      for (int i = 0; i < 4; ++i) q[keys[i]] = json(ranges[i]).dump();
    }
    req = {"GET", "/sessions/" + sid + "/candidates", q, ""};
    api_action();
  });
  auto* s_ranges = session->add_subcommand("ranges", "set the threshold ranges");
  s_ranges->add_option("session_id", sid)->required();
  s_ranges->add_option("ranges", ranges, "ls hs lh hh")->expected(4)->required();
  s_ranges->add_option("--version", version);
  s_ranges->callback([&] {
    json b = {{"simple", {ranges[0], ranges[1]}}, {"hard", {ranges[2], ranges[3]}}};
    req = {"POST", "/sessions/" + sid + "/ranges", {}, with_version(b).dump()};
    api_action();
  });
  auto* s_annotate = session->add_subcommand("annotate", "delete Simple or reserve Hard candidates");
  s_annotate->add_option("session_id", sid)->required();
  s_annotate->add_option("mode", mode, "delete|reserve")->required();
  s_annotate->add_option("ids", ids, "comma-separated proposal ids");
  s_annotate->add_option("--version", version);
  s_annotate->callback([&] {
    json b = {{"mode", mode}, {"ids", split(ids, ',')}};
    req = {"POST", "/sessions/" + sid + "/annotate", {}, with_version(b).dump()};
    api_action();
  });
  auto* s_final = session->add_subcommand("finalize", "finalize a session");
  s_final->add_option("session_id", sid)->required();
  s_final->add_option("--version", version);
  s_final->callback([&] {
    req = {"POST", "/sessions/" + sid + "/finalize", {}, with_version(json::object()).dump()};
    api_action();
  });

  // train / status / eval / classes
  auto* train = app.add_subcommand("train", "train one episode from finalized sessions");
  std::vector<std::string> train_ids;
  std::string ablation = "full";
  std::optional<std::size_t> epochs, batch;
  std::optional<double> lr;
  bool async = false;
  train->add_option("session_ids", train_ids)->required();
  train->add_option("--ablation", ablation, "full|wo-phrase-selection|wo-llm|wo-differentiation|wo-cs");
  train->add_option("--epochs", epochs);
  train->add_option("--batch-size", batch);
  train->add_option("--lr", lr);
  train->add_flag("--async", async);
  train->callback([&] {
    json hp = json::object();
    if (epochs) hp["epochs"] = *epochs;
    if (batch) hp["batch_size"] = *batch;
    if (lr) hp["learning_rate"] = *lr;
    json b = {{"session_ids", train_ids}, {"ablation", ablation}, {"hyperparams", hp}, {"async", async}};
    req = {"POST", "/train", {}, b.dump()};
    api_action();
  });
  app.add_subcommand("status", "training job status")->callback([&] {
    req = {"GET", "/train/status", {}, ""};
    api_action();
  });
  app.add_subcommand("eval", "evaluate on the eval split")->callback([&] {
    req = {"GET", "/eval", {}, ""};
    api_action();
  });
  app.add_subcommand("classes", "known classes and episodes")->callback([&] {
    req = {"GET", "/classes", {}, ""};
    api_action();
  });

  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic 12-class corpus");
  std::string synth_out, synth_backend = "file";
  std::uint64_t synth_seed = 0;
  std::size_t synth_train = 200, synth_eval = 50;
  double synth_spread = 1.0;
  synth->add_option("out", synth_out)->required();
  synth->add_option("--backend", synth_backend, "file|toy");
  synth->add_option("--seed", synth_seed);
  synth->add_option("--train-per-class", synth_train);
  synth->add_option("--eval-per-class", synth_eval);
  synth->add_option("--spread", synth_spread);
  synth->callback([&] {
    action = [&] {
      std::cout << write_synthetic(synth_out, synth_backend, synth_seed, synth_train, synth_eval, synth_spread).dump(2)
                << "\n";
      return 0;
    };
  });

  // bench
  auto* bench = app.add_subcommand("bench", "run an end-to-end experiment");
  std::string bench_name = "mini-owod", bench_dir = "owclip-bench";
  std::uint64_t bench_seed = 0;
  std::string bench_ablation = "full";
  double bench_spread = 1.0;
  bench->add_option("experiment", bench_name, "mini-owod|crop|freeze|persistence")
      ->check(CLI::IsMember({"mini-owod", "crop", "freeze", "persistence"}));
  bench->add_option("--work-dir", bench_dir);
  bench->add_option("--seed", bench_seed);
  bench->add_option("--ablation", bench_ablation);
  bench->add_option("--spread", bench_spread);
  bench->callback([&] {
    action = [&] {
      spdlog::set_level(spdlog::level::from_str(g.log_level.empty() ? "warn" : g.log_level));
      json out;
      if (bench_name == "mini-owod") {
        owclip::MiniOwodOptions o;
        o.work_dir = bench_dir;
        o.seed = bench_seed;
        o.ablation = bench_ablation;
        o.spread = bench_spread;
        out = owclip::run_mini_owod(o);
      } else if (bench_name == "crop") {
        owclip::CropEffectOptions o;
        o.seed = bench_seed;
        o.spread = bench_spread;
        out = owclip::run_crop_effect(o);
      } else if (bench_name == "freeze") {
        owclip::FreezeOptions o;
        o.work_dir = bench_dir;
        o.seed = bench_seed;
        out = owclip::run_freeze(o);
      } else {
        owclip::PersistenceOptions o;
        o.work_dir = bench_dir;
        o.seed = bench_seed;
        out = owclip::run_persistence(o);
      }
      std::cout << (g.compact ? out.dump() : out.dump(2)) << "\n";
      return 0;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    return action ? action() : 0;
  } catch (const owclip::Error& e) {
    std::cerr << json{{"error", e.kind()}, {"message", e.what()}}.dump(2) << "\n";
    return e.kind() == "StartupError" ? 3 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
