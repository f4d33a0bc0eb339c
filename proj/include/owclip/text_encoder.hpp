#pragma once

#include <string>
#include <string_view>

#include "owclip/error.hpp"
#include "owclip/rng.hpp"
#include "owclip/vector_ops.hpp"

namespace owclip {

// Frozen text side of the dual encoder.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::size_t dim() const = 0;
  virtual Vector encode(std::string_view phrase) const = 0;
};

// Deterministic stand-in for a pretrained text encoder:
//   seed   = FNV-1a-64(phrase bytes)
//   engine = std::mt19937_64(seed)
//   v[i]   = Rng::normal() for i = 0..dim-1   (Box-Muller, cosine branch)
//   output = v / ||v||
class HashTextEncoder final : public TextEncoder {
 public:
  explicit HashTextEncoder(std::size_t dim = 16) : dim_(dim) {
    if (dim == 0) throw ConfigError("text embedding dim must be positive");
  }

  std::size_t dim() const override { return dim_; }

  Vector encode(std::string_view phrase) const override {
    if (phrase.empty()) throw InputError("cannot encode an empty phrase");
    Rng rng(fnv1a64(phrase));
    Vector v(dim_);
    for (double& x : v) x = rng.normal();
    normalize_in_place(v);
    return v;
  }

 private:
  std::size_t dim_;
};

}  // namespace owclip
