#pragma once

// Episode checkpoint.
//
// Layout (integers and floats little-endian):
//   offset      size   field
//   0           8      magic "OWCKPT\0\0"
//   8           4      version (u32, currently 1)
//   12          4      header_len (u32)
//   16          H      JSON header: episode id, prompt shape, output dim,
//                      hyperparams and the episode's classes with phrases
//   16+H        8      count (u64)
//   24+H        8*n    f64 payload: prompt tokens, then one context vector
//                      per class in header order
//   24+H+8n     32     frozen fingerprint (SHA-256 of all earlier parameters)

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "owclip/embedding_store.hpp"
#include "owclip/error.hpp"
#include "owclip/prompt_tuner.hpp"

namespace owclip {

inline constexpr std::array<char, 8> kCheckpointMagic = {'O', 'W', 'C', 'K', 'P', 'T', '\0', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct EpisodeCheckpoint {
  Episode episode;
  std::vector<ClassEntry> classes;
};

inline std::string encode_checkpoint(const IncrementalClassifier& clf, std::size_t t) {
  const auto& ep = clf.episodes().at(t);
  if (!ep.finalized) throw StateError("episode " + std::to_string(ep.id) + " is not finalized");
  nlohmann::json classes = nlohmann::json::array();
  for (auto k : ep.class_indices) {
    const auto& e = clf.source().at(k);
    classes.push_back({{"label", e.label}, {"phrases", e.phrases}});
  }
  const nlohmann::json header = {{"episode_id", ep.id},
                                 {"prompt_layers", ep.prompts.layers},
                                 {"prompt_length", ep.prompts.length},
                                 {"d_model", ep.prompts.d_model},
                                 {"dim", clf.encoder().output_dim()},
                                 {"hyperparams", ep.hyperparams},
                                 {"classes", classes}};
  const std::string h = header.dump();
  const std::string params = clf.episode_parameter_bytes(t);
  std::string out(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  const std::uint64_t count = params.size() / sizeof(double);
  detail::put_le<std::uint64_t>(out, count);
  for (std::uint64_t i = 0; i < count; ++i) {
    double v = 0.0;
    std::memcpy(&v, params.data() + i * sizeof(double), sizeof(double));
    detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  out.append(reinterpret_cast<const char*>(ep.frozen_fingerprint.data()), ep.frozen_fingerprint.size());
  return out;
}

inline EpisodeCheckpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  auto need = [&](std::size_t off, std::size_t n, const char* what) {
    if (bytes.size() < off || bytes.size() - off < n) throw FormatError(std::string("checkpoint truncated in ") + what);
  };
  need(0, 16, "preamble");
  if (std::memcmp(bytes.data(), kCheckpointMagic.data(), 8) != 0) throw FormatError("checkpoint has bad magic");
  const auto version = detail::get_le<std::uint32_t>(bytes.data() + 8);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto hlen = detail::get_le<std::uint32_t>(bytes.data() + 12);
  need(16, hlen, "header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  std::size_t off = 16 + hlen;
  need(off, 8, "count");
  const auto count = detail::get_le<std::uint64_t>(bytes.data() + off);
  off += 8;
  if (count > (bytes.size() - off) / 8) throw FormatError("checkpoint truncated in payload");
  std::vector<double> values(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    values[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(bytes.data() + off + i * 8));
  }
  off += count * 8;
  need(off, 32, "fingerprint");
  if (bytes.size() != off + 32) throw FormatError("trailing bytes after checkpoint");

  EpisodeCheckpoint c;
  try {
    auto& ep = c.episode;
    ep.id = header.at("episode_id").get<int>();
    ep.hyperparams = header.at("hyperparams").get<EpisodeHyperparams>();
    ep.prompts = PromptBlock(ep.id, header.at("prompt_layers").get<std::size_t>(),
                             header.at("prompt_length").get<std::size_t>(), header.at("d_model").get<std::size_t>());
    const auto dim = header.at("dim").get<std::size_t>();
    const auto& classes = header.at("classes");
    if (count != ep.prompts.tokens.size() + classes.size() * dim) {
      throw FormatError("checkpoint payload size does not match its header");
    }
    std::copy_n(values.begin(), ep.prompts.tokens.size(), ep.prompts.tokens.begin());
    std::size_t v = ep.prompts.tokens.size();
    for (const auto& cj : classes) {
      ClassEntry e;
      e.label = cj.at("label").get<std::string>();
      e.phrases = cj.at("phrases").get<std::vector<std::string>>();
      e.context.assign(values.begin() + static_cast<std::ptrdiff_t>(v),
                       values.begin() + static_cast<std::ptrdiff_t>(v + dim));
      e.episode_id = ep.id;
      v += dim;
      c.classes.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  std::memcpy(c.episode.frozen_fingerprint.data(), bytes.data() + off, 32);
  c.episode.finalized = true;
  return c;
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int episode_id) {
  char name[32];
  std::snprintf(name, sizeof(name), "episode-%04d.owckpt", episode_id);
  return dir / name;
}

inline EpisodeCheckpoint read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// Restores episodes from checkpoints in id order; each one's fingerprint must
// match the parameters restored before it.
inline void restore_checkpoints(IncrementalClassifier& clf, const std::vector<std::filesystem::path>& paths) {
  for (const auto& p : paths) {
    auto c = read_checkpoint(p);
    clf.restore_episode(std::move(c.episode), std::move(c.classes));
  }
}

}  // namespace owclip
