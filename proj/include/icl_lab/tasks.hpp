// SPDX-License-Identifier: Apache-2.0
//
// Function-family samplers and prompt construction.

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "icl_lab/dynamics.hpp"
#include "icl_lab/error.hpp"
#include "icl_lab/prompt.hpp"
#include "icl_lab/rng.hpp"

namespace icl {

struct FunctionInstance {
  Family family = Family::linear;
  std::size_t d = 0;
  double noise_sigma = 0.0;
  // linear
  Vec w;
  // gaussian kernel
  std::vector<Vec> centers;
  Vec beta;
  double bandwidth = 1.0;
  // dynamics
  std::optional<DynamicsSpec> dynamics;
  Vec readout;
};

inline FunctionInstance sample_linear_task(std::size_t d, double noise_sigma, Rng& rng) {
  if (d == 0) throw ConfigError("linear task needs d >= 1");
  if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be non-negative");
  FunctionInstance f;
  f.family = Family::linear;
  f.d = d;
  f.noise_sigma = noise_sigma;
  do {
    f.w = sample_normal_vec(rng, d);
  } while (norm2(f.w) == 0.0);
  normalize_in_place(f.w);
  return f;
}

inline FunctionInstance sample_gaussian_kernel_task(std::size_t d, std::size_t num_centers, double bandwidth,
                                                    double noise_sigma, Rng& rng) {
  if (d == 0) throw ConfigError("kernel task needs d >= 1");
  if (num_centers == 0) throw ConfigError("kernel task needs at least one center");
  if (!(bandwidth > 0.0)) throw ConfigError("kernel bandwidth must be positive");
  if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be non-negative");
  FunctionInstance f;
  f.family = Family::gaussian_kernel;
  f.d = d;
  f.noise_sigma = noise_sigma;
  f.bandwidth = bandwidth;
  f.centers.resize(num_centers);
  for (auto& c : f.centers) c = sample_uniform_vec(rng, d, -1.0, 1.0);
  f.beta = sample_normal_vec(rng, num_centers);
  return f;
}

/// Dynamics task: system parameters plus a unit-norm read-out vector.
inline FunctionInstance sample_dynamics_task(DynamicsKind kind, std::size_t d, double noise_sigma, Rng& rng,
                                             const DynamicsSampling& opts = {}) {
  if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be non-negative");
  FunctionInstance f;
  f.family = Family::dynamics;
  f.dynamics = sample_dynamics_spec(kind, d, rng, opts);
  f.d = f.dynamics->state_dim;
  f.noise_sigma = noise_sigma;
  do {
    f.readout = sample_normal_vec(rng, f.d);
  } while (norm2(f.readout) == 0.0);
  normalize_in_place(f.readout);
  return f;
}

/// phi(x)_j = exp(-||x - c_j||^2 / (2 h^2))
inline Vec kernel_features(const FunctionInstance& f, const Vec& x) {
  if (f.family != Family::gaussian_kernel) throw ConfigError("kernel_features needs a gaussian_kernel instance");
  if (x.size() != f.d) throw ShapeError("input dimension " + std::to_string(x.size()) + " != task dimension " + std::to_string(f.d));
  Vec phi(f.centers.size());
  const double denom = 2.0 * f.bandwidth * f.bandwidth;
  for (std::size_t j = 0; j < f.centers.size(); ++j) phi[j] = std::exp(-squared_distance(x, f.centers[j]) / denom);
  return phi;
}

inline double eval_noiseless(const FunctionInstance& f, const Vec& x) {
  if (x.size() != f.d) {
    throw ShapeError("input dimension " + std::to_string(x.size()) + " != task dimension " + std::to_string(f.d));
  }
  switch (f.family) {
    case Family::linear: return dot(f.w, x);
    case Family::gaussian_kernel: {
      const Vec phi = kernel_features(f, x);
      return dot(f.beta, phi);
    }
    case Family::dynamics: return dot(f.readout, x);
  }
  throw Error("unreachable family");
}

/// Noiseless value plus N(0, noise_sigma^2) drawn from rng.
inline double eval_function(const FunctionInstance& f, const Vec& x, Rng& rng) {
  const double y = eval_noiseless(f, x);
  return f.noise_sigma > 0.0 ? y + f.noise_sigma * sample_normal(rng) : y;
}

/// Labels <beta, phi(x)> for every input of the prompt (context and query).
inline Vec kernel_feature_readout(const Prompt& p, const FunctionInstance& f) {
  if (f.family != Family::gaussian_kernel) throw ConfigError("kernel_feature_readout needs a gaussian_kernel instance");
  Vec out;
  out.reserve(p.xs.size());
  for (const auto& x : p.xs) out.push_back(dot(f.beta, kernel_features(f, x)));
  return out;
}

/// Bare-kernel predictor: Gaussian-weighted smoothing of the context labels
/// around the query. The trivial local-interpolation solution of the
/// unstructured kernel task.
inline double kernel_smoother_predict(const Prompt& p, double bandwidth) {
  if (p.k == 0) throw ConfigError("kernel smoother needs a non-empty context");
  double num = 0.0, den = 0.0;
  const double denom = 2.0 * bandwidth * bandwidth;
  for (std::size_t i = 0; i < p.k; ++i) {
    const double w = std::exp(-squared_distance(p.xs[i], p.query()) / denom);
    num += w * p.ys[i];
    den += w;
  }
  return den > 0.0 ? num / den : 0.0;
}

enum class InputBase { gaussian, uniform_cube, trajectory };

inline std::string_view to_string(InputBase b) {
  switch (b) {
    case InputBase::gaussian: return "gaussian";
    case InputBase::uniform_cube: return "uniform_cube";
    case InputBase::trajectory: return "trajectory";
  }
  return "?";
}

inline InputBase input_base_from_string(std::string_view s) {
  if (s == "gaussian") return InputBase::gaussian;
  if (s == "uniform_cube" || s == "uniform") return InputBase::uniform_cube;
  if (s == "trajectory") return InputBase::trajectory;
  throw ConfigError("unknown input distribution '" + std::string(s) + "'");
}

/// Input distribution: a base sampler times a scale factor (scaled(f) when f != 1).
struct InputDist {
  InputBase base = InputBase::gaussian;
  double scale = 1.0;

  static InputDist gaussian() { return {InputBase::gaussian, 1.0}; }
  static InputDist uniform_cube() { return {InputBase::uniform_cube, 1.0}; }
  static InputDist trajectory() { return {InputBase::trajectory, 1.0}; }
  InputDist scaled(double factor) const { return {base, scale * factor}; }
};

inline Vec sample_input(InputBase base, std::size_t d, Rng& rng) {
  switch (base) {
    case InputBase::gaussian: return sample_normal_vec(rng, d);
    case InputBase::uniform_cube: return sample_uniform_vec(rng, d, -1.0, 1.0);
    case InputBase::trajectory: break;
  }
  throw ConfigError("trajectory inputs cannot be drawn i.i.d.");
}

/// Builds a k-shot prompt. i.i.d. inputs for linear/kernel tasks; dynamics
/// instances require InputBase::trajectory and roll the system out instead.
inline Prompt generate_prompt(const FunctionInstance& f, std::size_t k, const InputDist& dist, Rng& rng) {
  if (k < 1) throw ConfigError("prompts need k >= 1 context pairs");
  if (f.family == Family::dynamics) {
    if (dist.base != InputBase::trajectory) {
      throw ConfigError("dynamics tasks need trajectory inputs, not i.i.d. " + std::string(to_string(dist.base)) + " draws");
    }
    Prompt p = dynamics_prompt(*f.dynamics, k, f.readout, f.noise_sigma, rng, dist.scale);
    return p;
  }
  if (dist.base == InputBase::trajectory) throw ConfigError("trajectory inputs need a dynamics task");
  Prompt p;
  p.k = k;
  p.meta.family = f.family;
  p.meta.d = f.d;
  p.meta.scaling_factor = dist.scale;
  p.xs.reserve(k + 1);
  for (std::size_t i = 0; i <= k; ++i) {
    Vec x = sample_input(dist.base, f.d, rng);
    for (auto& v : x) v *= dist.scale;
    p.xs.push_back(std::move(x));
  }
  p.ys.reserve(k);
  for (std::size_t i = 0; i < k; ++i) p.ys.push_back(eval_function(f, p.xs[i], rng));
  p.query_target = eval_function(f, p.xs[k], rng);
  return p;
}

enum class NormalizationMode { pooled, per_prompt };

namespace detail {
inline double label_scale(const std::vector<const Prompt*>& group) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const Prompt* p : group) {
    for (double y : p->ys) sum += y, ++n;
    sum += p->query_target;
    ++n;
  }
  const double mean = sum / static_cast<double>(n);
  double var = 0.0;
  for (const Prompt* p : group) {
    for (double y : p->ys) var += (y - mean) * (y - mean);
    var += (p->query_target - mean) * (p->query_target - mean);
  }
  var /= static_cast<double>(n);
  if (!(var > 0.0)) throw Error("cannot normalise labels with zero variance");
  return 1.0 / std::sqrt(var);
}
}  // namespace detail

/// Rescales labels (context and query) so their population variance is 1.
/// The mean is scaled along with the labels, never subtracted.
inline void normalize_outputs_batch(std::vector<Prompt>& batch, NormalizationMode mode = NormalizationMode::pooled) {
  if (batch.empty()) throw ConfigError("normalize_outputs_batch on an empty batch");
  for (const auto& p : batch)
    if (p.meta.family != Family::gaussian_kernel) throw ConfigError("output normalisation applies to gaussian_kernel prompts only");
  auto apply = [](Prompt& p, double s) {
    for (auto& y : p.ys) y *= s;
    p.query_target *= s;
  };
  if (mode == NormalizationMode::pooled) {
    std::vector<const Prompt*> all;
    for (const auto& p : batch) all.push_back(&p);
    const double s = detail::label_scale(all);
    for (auto& p : batch) apply(p, s);
  } else {
    for (auto& p : batch) apply(p, detail::label_scale({&p}));
  }
}

// ---------------------------------------------------------------------------
// Episode dump: one JSON object per line.

inline nlohmann::json episode_to_json(const Prompt& p) {
  nlohmann::json j;
  j["family"] = std::string(to_string(p.meta.family));
  j["d"] = p.meta.d;
  j["k"] = p.k;
  j["seed"] = p.meta.seed;
  j["xs"] = std::vector<Vec>(p.xs.begin(), p.xs.begin() + static_cast<std::ptrdiff_t>(p.k));
  j["ys"] = p.ys;
  j["query_x"] = p.query();
  j["query_y"] = p.query_target;
  return j;
}

inline Prompt episode_from_json(const nlohmann::json& j) {
  Prompt p;
  p.meta.family = family_from_string(j.at("family").get<std::string>());
  p.meta.d = j.at("d").get<std::size_t>();
  p.k = j.at("k").get<std::size_t>();
  p.meta.seed = j.at("seed").get<std::uint64_t>();
  p.xs = j.at("xs").get<std::vector<Vec>>();
  p.xs.push_back(j.at("query_x").get<Vec>());
  p.ys = j.at("ys").get<Vec>();
  p.query_target = j.at("query_y").get<double>();
  if (p.xs.size() != p.k + 1 || p.ys.size() != p.k) throw IoError("episode record has inconsistent lengths");
  return p;
}

}  // namespace icl
