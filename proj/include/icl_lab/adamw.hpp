// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "icl_lab/error.hpp"
#include "icl_lab/tensor.hpp"

namespace icl {

struct AdamWHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  Tensor m;
  Tensor v;
  std::uint64_t step_count = 0;

  static AdamWState fresh(const Shape& shape) { return AdamWState{Tensor(shape), Tensor(shape), 0}; }
};

/// One AdamW update with bias correction and decoupled weight decay.
/// Updates `param` and `state` in place.
inline void adamw_step(Tensor& param, const Tensor& grad, AdamWState& state, const AdamWHyper& hp,
                       const std::string& name = "param") {
  if (param.shape() != grad.shape() || state.m.shape() != param.shape() || state.v.shape() != param.shape()) {
    throw ShapeError("adamw_step shape mismatch for '" + name + "': param " + shape_str(param.shape()) +
                     ", grad " + shape_str(grad.shape()));
  }
  if (!(hp.lr > 0.0)) throw ConfigError("adamw_step: lr must be positive");
  if (!grad.all_finite()) throw NonFiniteError("non-finite gradient for parameter '" + name + "'");
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(hp.beta1, t);
  const double bc2 = 1.0 - std::pow(hp.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
    state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    param[i] -= hp.lr * (mhat / (std::sqrt(vhat) + hp.eps) + hp.weight_decay * param[i]);
  }
}

/// Pure variant returning the new parameter and state.
inline std::pair<Tensor, AdamWState> adamw_step(const Tensor& param, const Tensor& grad, const AdamWState& state,
                                                const AdamWHyper& hp, const std::string& name) {
  Tensor p = param;
  AdamWState s = state;
  adamw_step(p, grad, s, hp, name);
  return {std::move(p), std::move(s)};
}

}  // namespace icl
