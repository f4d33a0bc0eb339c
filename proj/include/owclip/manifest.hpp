#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "owclip/error.hpp"
#include "owclip/evaluation.hpp"
#include "owclip/vector_ops.hpp"

namespace owclip {

enum class Split { kTrain, kEval };

inline std::string to_string(Split s) { return s == Split::kTrain ? "train" : "eval"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "eval") return Split::kEval;
  throw InputError("split must be 'train' or 'eval', got '" + s + "'");
}

// One manifest row. `descriptor` is the raw input handed to the image
// encoder; rows may carry it inline, otherwise it is resolved at ingest.
struct ManifestRow {
  std::string image_path;
  std::string proposal_id;
  Box box;
  std::optional<std::string> gt_label;
  Split split = Split::kTrain;
  std::optional<Vector> descriptor;
  // Where image_path resolved to at ingest; relative paths are taken from the
  // manifest's directory.
  std::optional<std::string> image_file;
};

inline void to_json(nlohmann::json& j, const ManifestRow& r) {
  j = {{"image_path", r.image_path}, {"proposal_id", r.proposal_id}, {"box", r.box}, {"split", to_string(r.split)}};
  if (r.gt_label) j["gt_label"] = *r.gt_label;
  if (r.descriptor) j["descriptor"] = *r.descriptor;
  if (r.image_file) j["image_file"] = *r.image_file;
}

inline ManifestRow parse_manifest_row(const nlohmann::json& j) {
  if (!j.is_object()) throw InputError("row is not a JSON object");
  ManifestRow r;
  auto str = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_string()) throw InputError(std::string("missing string field '") + key + "'");
    return j[key].get<std::string>();
  };
  r.image_path = str("image_path");
  r.proposal_id = str("proposal_id");
  if (r.proposal_id.empty()) throw InputError("proposal_id is empty");
  if (!j.contains("box")) throw InputError("missing field 'box'");
  try {
    r.box = j["box"].get<Box>();
  } catch (const nlohmann::json::exception&) {
    throw InputError("box must hold four numbers");
  }
  if (!r.box.valid()) throw InputError("box must satisfy x1 < x2 and y1 < y2");
  r.split = parse_split(str("split"));
  if (j.contains("gt_label") && !j["gt_label"].is_null()) {
    if (!j["gt_label"].is_string()) throw InputError("gt_label must be a string");
    r.gt_label = j["gt_label"].get<std::string>();
  }
  if (r.split == Split::kEval && !r.gt_label) throw InputError("eval rows need a gt_label");
  if (j.contains("descriptor")) {
    try {
      r.descriptor = j["descriptor"].get<Vector>();
    } catch (const nlohmann::json::exception&) {
      throw InputError("descriptor must be an array of numbers");
    }
    if (r.descriptor->empty() || !all_finite(*r.descriptor)) throw InputError("descriptor must be non-empty and finite");
  }
  if (j.contains("image_file") && j["image_file"].is_string()) r.image_file = j["image_file"].get<std::string>();
  return r;
}

// JSONL manifest; blank lines are skipped. Errors name the 1-based line.
inline std::vector<ManifestRow> parse_manifest(std::istream& in, const std::string& name = "manifest") {
  std::vector<ManifestRow> rows;
  std::unordered_set<std::string> ids;
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw InputError(std::string("invalid JSON: ") + e.what());
      }
      auto row = parse_manifest_row(j);
      if (!ids.insert(row.proposal_id).second) throw InputError("duplicate proposal_id '" + row.proposal_id + "'");
      rows.push_back(std::move(row));
    } catch (const InputError& e) {
      throw IngestError(name + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

inline std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IngestError("cannot open manifest " + path.string());
  return parse_manifest(f, path.string());
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IngestError("cannot write manifest " + path.string());
  for (const auto& r : rows) f << nlohmann::json(r).dump() << "\n";
}

// Toy-backend images on disk: whitespace-separated numbers.
inline Vector read_descriptor_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IngestError("cannot open image " + path.string());
  Vector v;
  std::string tok;
  while (f >> tok) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw IngestError("image " + path.string() + " holds a non-number '" + tok + "'");
    }
  }
  if (v.empty() || !all_finite(v)) throw IngestError("image " + path.string() + " is empty or not finite");
  return v;
}

}  // namespace owclip
