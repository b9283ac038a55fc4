// SPDX-License-Identifier: Apache-2.0
//
// Task configuration and seeded episode sampling shared by training and
// evaluation.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icl_lab/config.hpp"
#include "icl_lab/rng.hpp"
#include "icl_lab/tasks.hpp"

namespace icl {

enum class NormalizeLabels { off, pooled, per_prompt };

inline std::string_view to_string(NormalizeLabels n) {
  switch (n) {
    case NormalizeLabels::off: return "off";
    case NormalizeLabels::pooled: return "pooled";
    case NormalizeLabels::per_prompt: return "per_prompt";
  }
  return "?";
}

inline NormalizeLabels normalize_labels_from_string(std::string_view s) {
  if (s == "off") return NormalizeLabels::off;
  if (s == "pooled") return NormalizeLabels::pooled;
  if (s == "per_prompt") return NormalizeLabels::per_prompt;
  throw ConfigError("unknown label normalisation '" + std::string(s) + "'");
}

/// Everything needed to sample episodes of one task family.
struct TaskConfig {
  Family family = Family::linear;
  DynamicsKind dynamics_kind = DynamicsKind::poly;
  std::size_t d = 5;
  std::size_t k = 11;
  double noise_sigma = 0.1;
  std::size_t num_centers = 20;
  double bandwidth = 1.5;
  InputBase input_dist = InputBase::gaussian;
  double input_scale = 1.0;
  NormalizeLabels normalize = NormalizeLabels::pooled;
  double poly_spectral_norm = 0.9;
  bool poly_cubic = false;
  bool duffing_continuous_time = true;

  bool operator==(const TaskConfig&) const = default;

  /// Input distribution actually used (dynamics always roll trajectories).
  InputDist input() const {
    return InputDist{family == Family::dynamics ? InputBase::trajectory : input_dist, input_scale};
  }

  /// Input dimension of an episode given the curriculum dimension.
  std::size_t episode_dim(std::size_t curriculum_dim) const {
    return family == Family::dynamics ? native_state_dim(dynamics_kind, curriculum_dim) : curriculum_dim;
  }

  bool normalizes() const { return family == Family::gaussian_kernel && normalize != NormalizeLabels::off; }

  KeyValues to_key_values() const {
    return {{"family", std::string(to_string(family))},
            {"dynamics_kind", std::string(to_string(dynamics_kind))},
            {"d", std::to_string(d)},
            {"k", std::to_string(k)},
            {"noise_sigma", kv::from_double(noise_sigma)},
            {"num_centers", std::to_string(num_centers)},
            {"bandwidth", kv::from_double(bandwidth)},
            {"input_dist", std::string(to_string(input_dist))},
            {"input_scale", kv::from_double(input_scale)},
            {"normalize", std::string(to_string(normalize))},
            {"poly_spectral_norm", kv::from_double(poly_spectral_norm)},
            {"poly_cubic", kv::from_bool(poly_cubic)},
            {"duffing_continuous_time", kv::from_bool(duffing_continuous_time)}};
  }

  bool set(const std::string& key, const std::string& v) {
    if (key == "family") family = family_from_string(v);
    else if (key == "dynamics_kind") dynamics_kind = dynamics_kind_from_string(v);
    else if (key == "d") d = kv::to_u64(key, v);
    else if (key == "k") k = kv::to_u64(key, v);
    else if (key == "noise_sigma") noise_sigma = kv::to_double(key, v);
    else if (key == "num_centers") num_centers = kv::to_u64(key, v);
    else if (key == "bandwidth") bandwidth = kv::to_double(key, v);
    else if (key == "input_dist") input_dist = input_base_from_string(v);
    else if (key == "input_scale") input_scale = kv::to_double(key, v);
    else if (key == "normalize") normalize = normalize_labels_from_string(v);
    else if (key == "poly_spectral_norm") poly_spectral_norm = kv::to_double(key, v);
    else if (key == "poly_cubic") poly_cubic = kv::to_bool(key, v);
    else if (key == "duffing_continuous_time") duffing_continuous_time = kv::to_bool(key, v);
    else return false;
    return true;
  }

  void validate() const {
    if (d == 0) throw ConfigError("d must be >= 1");
    if (k == 0) throw ConfigError("k must be >= 1");
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be non-negative");
    if (family == Family::gaussian_kernel && (num_centers == 0 || !(bandwidth > 0.0))) {
      throw ConfigError("kernel tasks need num_centers >= 1 and bandwidth > 0");
    }
    if (!(input_scale > 0.0)) throw ConfigError("input_scale must be positive");
  }
};

/// Kernel experiment preset: 20 centers, bandwidth 1.5, noise 0.1, inputs
/// uniform on [-1, 1]^d.
inline TaskConfig kernel_paper_setup() {
  TaskConfig t;
  t.family = Family::gaussian_kernel;
  t.num_centers = 20;
  t.bandwidth = 1.5;
  t.noise_sigma = 0.1;
  t.input_dist = InputBase::uniform_cube;
  return t;
}

inline FunctionInstance sample_instance(const TaskConfig& cfg, std::size_t d, Rng& rng) {
  switch (cfg.family) {
    case Family::linear: return sample_linear_task(d, cfg.noise_sigma, rng);
    case Family::gaussian_kernel:
      return sample_gaussian_kernel_task(d, cfg.num_centers, cfg.bandwidth, cfg.noise_sigma, rng);
    case Family::dynamics: {
      DynamicsSampling opts;
      opts.poly_spectral_norm = cfg.poly_spectral_norm;
      opts.poly_cubic = cfg.poly_cubic;
      FunctionInstance f = sample_dynamics_task(cfg.dynamics_kind, d, cfg.noise_sigma, rng, opts);
      f.dynamics->duffing.continuous_time = cfg.duffing_continuous_time;
      return f;
    }
  }
  throw Error("unreachable family");
}

/// Dynamics instances whose trajectory leaves the overflow guard are redrawn
/// (from the same stream) at most this many times.
inline constexpr int kMaxDivergenceRedraws = 1000;

/// One episode: instance and prompt both drawn from the episode's own stream.
inline Prompt sample_episode(const TaskConfig& cfg, std::size_t curriculum_dim, std::size_t k, const EpisodeSeed& seed,
                             const InputDist& dist) {
  Rng rng = seed.rng();
  const std::size_t d = cfg.episode_dim(curriculum_dim);
  for (int attempt = 0;; ++attempt) {
    FunctionInstance f = sample_instance(cfg, d, rng);
    try {
      Prompt p = generate_prompt(f, k, dist, rng);
      p.meta.seed = seed.stream_seed();
      return p;
    } catch (const DivergenceError&) {
      if (f.family != Family::dynamics || attempt + 1 >= kMaxDivergenceRedraws) throw;
    }
  }
}

inline Prompt sample_episode(const TaskConfig& cfg, std::size_t curriculum_dim, std::size_t k, const EpisodeSeed& seed) {
  return sample_episode(cfg, curriculum_dim, k, seed, cfg.input());
}

/// Episodes base_seed/[first, first+count) at fixed (d, k), normalised as one batch.
inline std::vector<Prompt> sample_episodes(const TaskConfig& cfg, std::size_t curriculum_dim, std::size_t k,
                                           std::uint64_t base_seed, std::uint64_t first, std::size_t count) {
  std::vector<Prompt> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(sample_episode(cfg, curriculum_dim, k, {base_seed, first + i}));
  if (cfg.normalizes() && !out.empty()) {
    normalize_outputs_batch(out, cfg.normalize == NormalizeLabels::pooled ? NormalizationMode::pooled
                                                                          : NormalizationMode::per_prompt);
  }
  return out;
}

}  // namespace icl
