#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "owclip/error.hpp"

namespace owclip {

// Embeddings and parameters are f64 in memory; the on-disk store is f32.
using Vector = std::vector<double>;

inline void require_same_dim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dimension mismatch: " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  require_same_dim(a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

inline bool all_finite(std::span<const double> a) {
  for (double v : a) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// Returns a / ||a||. A zero vector cannot be normalized.
inline Vector l2_normalized(std::span<const double> a) {
  const double n = l2_norm(a);
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw InputError("cannot normalize a zero or non-finite vector");
  }
  Vector out(a.begin(), a.end());
  for (double& v : out) v /= n;
  return out;
}

inline void normalize_in_place(std::span<double> a) {
  const double n = l2_norm(a);
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw NumericsError("cannot normalize a zero or non-finite vector");
  }
  for (double& v : a) v /= n;
}

// Normalized dot product, clamped to [-1, 1] against rounding.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  require_same_dim(a, b);
  if (!all_finite(a) || !all_finite(b)) throw InputError("non-finite embedding");
  const double denom = l2_norm(a) * l2_norm(b);
  if (!(denom > 0.0)) throw InputError("cosine of a zero vector is undefined");
  const double c = dot(a, b) / denom;
  return c > 1.0 ? 1.0 : (c < -1.0 ? -1.0 : c);
}

inline Vector mean_of(const std::vector<Vector>& rows) {
  if (rows.empty()) throw InputError("mean of an empty set");
  Vector m(rows.front().size(), 0.0);
  for (const auto& r : rows) {
    require_same_dim(m, r);
    for (std::size_t i = 0; i < r.size(); ++i) m[i] += r[i];
  }
  for (double& v : m) v /= static_cast<double>(rows.size());
  return m;
}

}  // namespace owclip
