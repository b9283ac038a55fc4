// SPDX-License-Identifier: Apache-2.0
//
// Explicit one-step maps for the six nonlinear dynamical systems and their
// trajectory roll-outs with a linear read-out label.

#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "icl_lab/error.hpp"
#include "icl_lab/prompt.hpp"
#include "icl_lab/rng.hpp"

namespace icl {

enum class DynamicsKind { poly, tanh, logistic, duffing, vdp, lorenz };

inline std::string_view to_string(DynamicsKind k) {
  switch (k) {
    case DynamicsKind::poly: return "poly";
    case DynamicsKind::tanh: return "tanh";
    case DynamicsKind::logistic: return "logistic";
    case DynamicsKind::duffing: return "duffing";
    case DynamicsKind::vdp: return "vdp";
    case DynamicsKind::lorenz: return "lorenz";
  }
  return "?";
}

inline DynamicsKind dynamics_kind_from_string(std::string_view s) {
  for (auto k : {DynamicsKind::poly, DynamicsKind::tanh, DynamicsKind::logistic, DynamicsKind::duffing,
                 DynamicsKind::vdp, DynamicsKind::lorenz})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown dynamics kind '" + std::string(s) + "'");
}

/// Overflow guard: any |coordinate| above this is reported as divergence.
inline constexpr double kDivergenceGuard = 1e12;

struct PolyParams {
  std::vector<Vec> W;        // d x d, linear term
  std::vector<Vec> W2;       // d x d, applied to elementwise squares
  std::vector<Vec> W3;       // d x d, optional cubic term (empty when disabled)
  Vec b;
};

struct TanhParams {
  std::vector<Vec> W;
  Vec b;
};

struct LogisticParams {
  double r = 3.9;
};

struct DuffingParams {
  double alpha = 1.0;
  double beta = 0.1;
  double gamma = 0.1;
  double f = 0.5;
  double omega = 1.0;
  double delta = 0.01;
  /// true: forcing uses continuous time n*delta; false: the raw step index n.
  bool continuous_time = true;
};

struct VdpParams {
  double mu = 2.0;
  double delta = 0.01;
};

struct LorenzParams {
  double sigma = 10.0;
  double rho = 28.0;
  double beta = 8.0 / 3.0;
  double delta = 0.01;
};

struct DynamicsSpec {
  DynamicsKind kind = DynamicsKind::logistic;
  std::size_t state_dim = 1;
  PolyParams poly;
  TanhParams tanh;
  LogisticParams logistic;
  DuffingParams duffing;
  VdpParams vdp;
  LorenzParams lorenz;
};

struct Trajectory {
  std::vector<Vec> states;  // x_0 .. x_T
  Vec labels;               // y_t = <v, x_t> + eps_t
  std::vector<std::size_t> time_indices;
};

namespace detail {

inline Vec matvec(const std::vector<Vec>& M, const Vec& x) {
  Vec y(M.size(), 0.0);
  for (std::size_t i = 0; i < M.size(); ++i) y[i] = dot(M[i], x);
  return y;
}

inline double spectral_norm(const std::vector<Vec>& M) {
  const auto n = static_cast<Eigen::Index>(M.size());
  Eigen::MatrixXd A(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) A(i, j) = M[i][j];
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
  return svd.singularValues()(0);
}

inline std::vector<Vec> gaussian_matrix(Rng& rng, std::size_t d) {
  std::vector<Vec> M(d);
  for (auto& row : M) row = sample_normal_vec(rng, d);
  return M;
}

inline void rescale_to_norm(std::vector<Vec>& M, double target) {
  const double s = spectral_norm(M);
  if (s > 0.0)
    for (auto& row : M)
      for (auto& v : row) v *= target / s;
}

}  // namespace detail

/// Fixed state dimension of each system (poly/tanh use the requested d).
inline std::size_t native_state_dim(DynamicsKind kind, std::size_t d) {
  switch (kind) {
    case DynamicsKind::logistic: return 1;
    case DynamicsKind::duffing:
    case DynamicsKind::vdp: return 2;
    case DynamicsKind::lorenz: return 3;
    default: return d;
  }
}

struct DynamicsSampling {
  /// Spectral-norm cap for the poly maps W, W2 (and W3).
  double poly_spectral_norm = 0.9;
  bool poly_cubic = false;
};

/// Draws a system of the given kind. Random parameters (poly, tanh) are N(0,1);
/// poly matrices are rescaled to spectral norm `poly_spectral_norm` and b shrunk by 1/sqrt(d).
inline DynamicsSpec sample_dynamics_spec(DynamicsKind kind, std::size_t d, Rng& rng,
                                         const DynamicsSampling& opts = {}) {
  DynamicsSpec spec;
  spec.kind = kind;
  spec.state_dim = native_state_dim(kind, d);
  if (spec.state_dim == 0) throw ConfigError("dynamics state dimension must be >= 1");
  const std::size_t n = spec.state_dim;
  if (kind == DynamicsKind::poly) {
    spec.poly.W = detail::gaussian_matrix(rng, n);
    spec.poly.W2 = detail::gaussian_matrix(rng, n);
    spec.poly.b = sample_normal_vec(rng, n);
    detail::rescale_to_norm(spec.poly.W, opts.poly_spectral_norm);
    detail::rescale_to_norm(spec.poly.W2, opts.poly_spectral_norm);
    for (auto& v : spec.poly.b) v /= std::sqrt(static_cast<double>(n));
    if (opts.poly_cubic) {
      spec.poly.W3 = detail::gaussian_matrix(rng, n);
      detail::rescale_to_norm(spec.poly.W3, opts.poly_spectral_norm);
    }
  } else if (kind == DynamicsKind::tanh) {
    spec.tanh.W = detail::gaussian_matrix(rng, n);
    spec.tanh.b = sample_normal_vec(rng, n);
  }
  return spec;
}

/// One application of the system's update. `t` is the step index n of `state`.
inline Vec step(const DynamicsSpec& spec, const Vec& state, std::size_t t) {
  if (state.size() != spec.state_dim) {
    throw ShapeError("dynamics step: state has dimension " + std::to_string(state.size()) + ", system expects " +
                     std::to_string(spec.state_dim));
  }
  for (double v : state)
    if (!std::isfinite(v)) throw DivergenceError("non-finite state entering step " + std::to_string(t), t);

  switch (spec.kind) {
    case DynamicsKind::poly: {
      const auto& p = spec.poly;
      Vec sq(state.size()), cube(state.size());
      for (std::size_t i = 0; i < state.size(); ++i) {
        sq[i] = state[i] * state[i];
        cube[i] = sq[i] * state[i];
      }
      Vec out = detail::matvec(p.W, state);
      const Vec quad = detail::matvec(p.W2, sq);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += quad[i] + p.b[i];
      if (!p.W3.empty()) {
        const Vec cub = detail::matvec(p.W3, cube);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += cub[i];
      }
      return out;
    }
    case DynamicsKind::tanh: {
      Vec out = detail::matvec(spec.tanh.W, state);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i] + spec.tanh.b[i]);
      return out;
    }
    case DynamicsKind::logistic: {
      const double x = state[0];
      return {spec.logistic.r * x * (1.0 - x)};
    }
    case DynamicsKind::duffing: {
      const auto& p = spec.duffing;
      const double x = state[0], v = state[1];
      const double time = p.continuous_time ? static_cast<double>(t) * p.delta : static_cast<double>(t);
      const double accel = -p.alpha * x - p.beta * x * x * x - p.gamma * v + p.f * std::cos(p.omega * time);
      return {x + p.delta * v, v + p.delta * accel};
    }
    case DynamicsKind::vdp: {
      const auto& p = spec.vdp;
      const double x = state[0], v = state[1];
      return {x + p.delta * v, v + p.delta * (p.mu * (1.0 - x * x) * v - x)};
    }
    case DynamicsKind::lorenz: {
      const auto& p = spec.lorenz;
      const double x = state[0], y = state[1], z = state[2];
      return {x + p.delta * p.sigma * (y - x), y + p.delta * (x * (p.rho - z) - y),
              z + p.delta * (x * y - p.beta * z)};
    }
  }
  throw Error("unreachable dynamics kind");
}

/// Iterates `step` T times from x0. Labels carry i.i.d. N(0, noise_sigma^2) noise.
inline Trajectory roll_out(const DynamicsSpec& spec, const Vec& x0, std::size_t T, const Vec& readout,
                           double noise_sigma, Rng& rng) {
  if (T < 1) throw ConfigError("roll_out needs T >= 1");
  if (readout.size() != spec.state_dim) throw ShapeError("readout dimension does not match the state dimension");
  Trajectory tr;
  tr.states.reserve(T + 1);
  tr.states.push_back(x0);
  for (std::size_t t = 0; t < T; ++t) {
    Vec next = step(spec, tr.states.back(), t);
    for (double v : next) {
      if (!std::isfinite(v) || std::abs(v) > kDivergenceGuard) {
        throw DivergenceError(std::string(to_string(spec.kind)) + " trajectory diverged at step " +
                                  std::to_string(t + 1),
                              t + 1);
      }
    }
    tr.states.push_back(std::move(next));
  }
  tr.labels.resize(T + 1);
  tr.time_indices.resize(T + 1);
  for (std::size_t t = 0; t <= T; ++t) {
    const double eps = noise_sigma > 0.0 ? noise_sigma * sample_normal(rng) : 0.0;
    tr.labels[t] = dot(readout, tr.states[t]) + eps;
    tr.time_indices[t] = t;
  }
  return tr;
}

/// Initial state: uniform on (0, 1) for the logistic map (the map leaves [0, 1]
/// invariant and diverges from negative starts), N(0, I) otherwise.
inline Vec sample_initial_state(const DynamicsSpec& spec, Rng& rng) {
  if (spec.kind == DynamicsKind::logistic) return {sample_uniform(rng, 0.0, 1.0)};
  return sample_normal_vec(rng, spec.state_dim);
}

/// Packages x_0..x_k as a prompt: context pairs (x_t, y_t) for t < k, query x_k.
inline Prompt trajectory_prompt(const Trajectory& tr, std::size_t k) {
  if (k < 1 || tr.states.size() < k + 1) throw ConfigError("trajectory too short for a k-shot prompt");
  Prompt p;
  p.k = k;
  p.xs.assign(tr.states.begin(), tr.states.begin() + static_cast<std::ptrdiff_t>(k + 1));
  p.ys.assign(tr.labels.begin(), tr.labels.begin() + static_cast<std::ptrdiff_t>(k));
  p.query_target = tr.labels[k];
  p.meta.family = Family::dynamics;
  p.meta.d = tr.states.front().size();
  return p;
}

/// Samples x_0 (scaled by `input_scale`), rolls out k steps and packages the prompt.
inline Prompt dynamics_prompt(const DynamicsSpec& spec, std::size_t k, const Vec& readout, double noise_sigma,
                              Rng& rng, double input_scale = 1.0) {
  if (k < 1) throw ConfigError("dynamics_prompt needs k >= 1");
  Vec x0 = sample_initial_state(spec, rng);
  for (auto& v : x0) v *= input_scale;
  Prompt p = trajectory_prompt(roll_out(spec, x0, k, readout, noise_sigma, rng), k);
  p.meta.scaling_factor = input_scale;
  return p;
}

/// CSV columns: t, x_0..x_{D-1}, y
inline void write_trajectory_csv(const Trajectory& tr, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  const std::size_t D = tr.states.empty() ? 0 : tr.states.front().size();
  os << "t";
  for (std::size_t i = 0; i < D; ++i) os << ",x_" << i;
  os << ",y\n";
  os.precision(17);
  for (std::size_t t = 0; t < tr.states.size(); ++t) {
    os << tr.time_indices[t];
    for (double v : tr.states[t]) os << ',' << v;
    os << ',' << tr.labels[t] << '\n';
  }
  if (!os) throw IoError("write failed for '" + path + "'");
}

}  // namespace icl
