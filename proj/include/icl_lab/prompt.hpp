// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "icl_lab/error.hpp"

namespace icl {

using Vec = std::vector<double>;

enum class Family { linear, gaussian_kernel, dynamics };

inline std::string_view to_string(Family f) {
  switch (f) {
    case Family::linear: return "linear";
    case Family::gaussian_kernel: return "gaussian_kernel";
    case Family::dynamics: return "dynamics";
  }
  return "?";
}

inline Family family_from_string(std::string_view s) {
  if (s == "linear") return Family::linear;
  if (s == "gaussian_kernel" || s == "kernel") return Family::gaussian_kernel;
  if (s == "dynamics") return Family::dynamics;
  throw ConfigError("unknown task family '" + std::string(s) + "'");
}

struct PromptMeta {
  Family family = Family::linear;
  std::size_t d = 0;
  std::uint64_t seed = 0;
  double scaling_factor = 1.0;

  bool operator==(const PromptMeta&) const = default;
};

/// k context pairs plus one query input. xs holds k+1 inputs (the last is the
/// query); ys holds the k context labels; query_target is never a model input.
struct Prompt {
  std::vector<Vec> xs;
  Vec ys;
  double query_target = 0.0;
  std::size_t k = 0;
  PromptMeta meta;

  const Vec& query() const { return xs.back(); }
  bool operator==(const Prompt&) const = default;
};

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const Vec& a) { return std::sqrt(dot(a, a)); }

inline void normalize_in_place(Vec& v) {
  const double n = norm2(v);
  if (!(n > 0.0)) throw Error("cannot normalise a zero vector");
  for (auto& x : v) x /= n;
}

inline double squared_distance(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace icl
