#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>

#include <openssl/evp.h>

#include "owclip/error.hpp"

namespace owclip {

using Digest = std::array<std::uint8_t, 32>;

// Incremental SHA-256 over byte strings.
class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
      throw StateError("sha256 init failed");
    }
  }

  Sha256& update(std::string_view bytes) {
    if (EVP_DigestUpdate(ctx_.get(), bytes.data(), bytes.size()) != 1) {
      throw StateError("sha256 update failed");
    }
    return *this;
  }

  Sha256& update(std::span<const double> values) {
    // f64 little-endian; x86-64 and aarch64 hosts are little-endian already.
    static_assert(std::endian::native == std::endian::little);
    return update(std::string_view(reinterpret_cast<const char*>(values.data()),
                                   values.size() * sizeof(double)));
  }

  Digest finish() {
    Digest d{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), d.data(), &len) != 1 || len != d.size()) {
      throw StateError("sha256 final failed");
    }
    return d;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string to_hex(const Digest& d) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (auto b : d) {
    s.push_back(kHex[b >> 4]);
    s.push_back(kHex[b & 0xf]);
  }
  return s;
}

inline Digest sha256(std::string_view bytes) { return Sha256().update(bytes).finish(); }

}  // namespace owclip
