// SPDX-License-Identifier: Apache-2.0
//
// Closed-form reference estimators evaluated on a single prompt.

#pragma once

#include <algorithm>
#include <array>
#include <limits>
#include <numeric>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "icl_lab/error.hpp"
#include "icl_lab/prompt.hpp"

namespace icl {

enum class BaselineKind { zero, least_squares, knn3, averaging };

inline constexpr std::array<BaselineKind, 4> kAllBaselines{BaselineKind::zero, BaselineKind::least_squares,
                                                           BaselineKind::knn3, BaselineKind::averaging};

inline std::string_view to_string(BaselineKind k) {
  switch (k) {
    case BaselineKind::zero: return "zero";
    case BaselineKind::least_squares: return "lsq";
    case BaselineKind::knn3: return "knn3";
    case BaselineKind::averaging: return "avg";
  }
  return "?";
}

inline double zero_estimator(const Prompt&) { return 0.0; }

/// Minimum-norm least-squares weights X^+ y. Singular values below
/// max(k, d) * eps * sigma_max are treated as zero.
inline Vec least_squares_weights(const Prompt& p) {
  if (p.k < 1) throw ConfigError("least squares needs k >= 1");
  const auto k = static_cast<Eigen::Index>(p.k);
  const auto d = static_cast<Eigen::Index>(p.query().size());
  Eigen::MatrixXd X(k, d);
  Eigen::VectorXd y(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) X(i, j) = p.xs[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    y(i) = p.ys[static_cast<std::size_t>(i)];
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(X, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  const double smax = s.size() > 0 ? s(0) : 0.0;
  const double cutoff = static_cast<double>(std::max(k, d)) * std::numeric_limits<double>::epsilon() * smax;
  Eigen::VectorXd uty = svd.matrixU().transpose() * y;
  for (Eigen::Index i = 0; i < s.size(); ++i) uty(i) = s(i) > cutoff ? uty(i) / s(i) : 0.0;
  const Eigen::VectorXd w = svd.matrixV() * uty;
  return Vec(w.data(), w.data() + w.size());
}

inline double least_squares_estimator(const Prompt& p) { return dot(least_squares_weights(p), p.query()); }

/// Mean label of the min(3, k) context inputs nearest the query; ties are
/// broken by lower context index.
inline double knn3_estimator(const Prompt& p) {
  if (p.k < 1) throw ConfigError("knn3 needs k >= 1");
  std::vector<std::size_t> order(p.k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Vec dist(p.k);
  for (std::size_t i = 0; i < p.k; ++i) dist[i] = squared_distance(p.xs[i], p.query());
  const std::size_t m = std::min<std::size_t>(3, p.k);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m), order.end(),
                    [&](std::size_t a, std::size_t b) { return dist[a] < dist[b] || (dist[a] == dist[b] && a < b); });
  double s = 0.0;
  for (std::size_t i = 0; i < m; ++i) s += p.ys[order[i]];
  return s / static_cast<double>(m);
}

/// w = (1/k) sum_i x_i y_i; prediction <w, x_query>.
inline double averaging_estimator(const Prompt& p) {
  if (p.k < 1) throw ConfigError("averaging needs k >= 1");
  Vec w(p.query().size(), 0.0);
  for (std::size_t i = 0; i < p.k; ++i)
    for (std::size_t j = 0; j < w.size(); ++j) w[j] += p.xs[i][j] * p.ys[i];
  for (auto& v : w) v /= static_cast<double>(p.k);
  return dot(w, p.query());
}

inline double run_baseline(BaselineKind kind, const Prompt& p) {
  switch (kind) {
    case BaselineKind::zero: return zero_estimator(p);
    case BaselineKind::least_squares: return least_squares_estimator(p);
    case BaselineKind::knn3: return knn3_estimator(p);
    case BaselineKind::averaging: return averaging_estimator(p);
  }
  throw Error("unreachable baseline");
}

}  // namespace icl
