#pragma once

// Binary embedding store.
//
// Layout (all integers little-endian):
//   offset  size  field
//   0       8     magic  "OWEMBED\0"
//   8       4     version (u32, currently 1)
//   12      8     count   (u64, number of rows)
//   20      4     dim     (u32, > 0)
//   24      4     dtype   (u32, 0 = f32)
//   28      ...   count * dim IEEE-754 f32 values, row-major, little-endian
//
// The file length must be exactly 28 + count * dim * 4 bytes. A sidecar
// `<path>.idx.jsonl` maps row index to proposal id, one JSON object per line:
//   {"row": 0, "proposal_id": "p0001"}

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "owclip/error.hpp"
#include "owclip/vector_ops.hpp"

namespace owclip {

enum class StoreDType : std::uint32_t { kF32 = 0 };

struct EmbeddingStoreHeader {
  static constexpr std::array<char, 8> kMagic = {'O', 'W', 'E', 'M', 'B', 'E', 'D', '\0'};
  static constexpr std::size_t kSize = 28;
  static constexpr std::uint32_t kVersion = 1;

  std::array<char, 8> magic = kMagic;
  std::uint32_t version = kVersion;
  std::uint64_t count = 0;
  std::uint32_t dim = 0;
  StoreDType dtype = StoreDType::kF32;

  std::uint64_t payload_bytes() const { return count * dim * 4ULL; }
};

struct EmbeddingStore {
  EmbeddingStoreHeader header;
  std::vector<float> values;  // count * dim, row-major

  std::span<const float> row(std::size_t i) const {
    return {values.data() + i * header.dim, header.dim};
  }

  Vector row_f64(std::size_t i) const {
    auto r = row(i);
    return Vector(r.begin(), r.end());
  }

  static EmbeddingStore from_rows(const std::vector<Vector>& rows) {
    EmbeddingStore s;
    if (rows.empty()) throw FormatError("embedding store needs at least one row to infer dim");
    s.header.dim = static_cast<std::uint32_t>(rows.front().size());
    s.header.count = rows.size();
    s.values.reserve(rows.size() * rows.front().size());
    for (const auto& r : rows) {
      require_same_dim(rows.front(), r);
      for (double v : r) s.values.push_back(static_cast<float>(v));
    }
    return s;
  }
};

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const unsigned char* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode_embedding_store(const EmbeddingStore& store) {
  const auto& h = store.header;
  if (h.dim == 0) throw FormatError("dim must be positive");
  if (store.values.size() != h.count * h.dim) {
    throw FormatError("value count does not match count * dim");
  }
  std::string out;
  out.reserve(EmbeddingStoreHeader::kSize + h.payload_bytes());
  out.append(h.magic.data(), h.magic.size());
  detail::put_le<std::uint32_t>(out, h.version);
  detail::put_le<std::uint64_t>(out, h.count);
  detail::put_le<std::uint32_t>(out, h.dim);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(h.dtype));
  for (float f : store.values) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

inline EmbeddingStore decode_embedding_store(std::span<const unsigned char> bytes) {
  if (bytes.size() < EmbeddingStoreHeader::kSize) throw FormatError("truncated header");
  EmbeddingStore s;
  auto& h = s.header;
  std::memcpy(h.magic.data(), bytes.data(), 8);
  if (h.magic != EmbeddingStoreHeader::kMagic) throw FormatError("bad magic");
  const unsigned char* p = bytes.data();
  h.version = detail::get_le<std::uint32_t>(p + 8);
  h.count = detail::get_le<std::uint64_t>(p + 12);
  h.dim = detail::get_le<std::uint32_t>(p + 20);
  const auto dtype = detail::get_le<std::uint32_t>(p + 24);
  if (h.version != EmbeddingStoreHeader::kVersion) {
    throw FormatError("unsupported version " + std::to_string(h.version));
  }
  if (h.dim == 0) throw FormatError("dim 0");
  if (dtype != static_cast<std::uint32_t>(StoreDType::kF32)) throw FormatError("unsupported dtype");
  h.dtype = StoreDType::kF32;
  const std::uint64_t payload = bytes.size() - EmbeddingStoreHeader::kSize;
  if (h.count > payload / (4ULL * h.dim)) {
    throw FormatError("truncated payload: header declares " + std::to_string(h.count) + " x " +
                      std::to_string(h.dim) + " values, found " + std::to_string(payload) +
                      " bytes");
  }
  if (payload != h.payload_bytes()) throw FormatError("trailing bytes after payload");
  s.values.resize(h.count * h.dim);
  const unsigned char* q = p + EmbeddingStoreHeader::kSize;
  for (std::size_t i = 0; i < s.values.size(); ++i) {
    s.values[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(q + 4 * i));
  }
  return s;
}

inline void write_embedding_store(const std::filesystem::path& path, const EmbeddingStore& store) {
  const std::string bytes = encode_embedding_store(store);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open for writing: " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("write failed: " + path.string());
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open: " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline EmbeddingStore read_embedding_store(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_embedding_store(bytes);
}

inline std::filesystem::path sidecar_index_path(const std::filesystem::path& store_path) {
  return std::filesystem::path(store_path.string() + ".idx.jsonl");
}

inline void write_sidecar_index(const std::filesystem::path& store_path,
                                const std::vector<std::string>& proposal_ids) {
  std::ofstream f(sidecar_index_path(store_path), std::ios::trunc);
  if (!f) throw FormatError("cannot write sidecar index for " + store_path.string());
  for (std::size_t i = 0; i < proposal_ids.size(); ++i) {
    f << nlohmann::json{{"row", i}, {"proposal_id", proposal_ids[i]}}.dump() << '\n';
  }
}

// Returns proposal ids indexed by row.
inline std::vector<std::string> read_sidecar_index(const std::filesystem::path& store_path,
                                                   std::size_t expected_rows) {
  std::ifstream f(sidecar_index_path(store_path));
  if (!f) throw FormatError("missing sidecar index for " + store_path.string());
  std::vector<std::string> ids(expected_rows);
  std::vector<bool> seen(expected_rows, false);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto row = j.at("row").get<std::size_t>();
      if (row >= expected_rows || seen[row]) throw FormatError("bad row");
      ids[row] = j.at("proposal_id").get<std::string>();
      seen[row] = true;
    } catch (const std::exception& e) {
      throw FormatError("sidecar index line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  for (std::size_t i = 0; i < expected_rows; ++i) {
    if (!seen[i]) throw FormatError("sidecar index missing row " + std::to_string(i));
  }
  return ids;
}

}  // namespace owclip
