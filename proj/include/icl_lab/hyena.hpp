// SPDX-License-Identifier: Apache-2.0
//
// Hyena-style mixing: a per-channel causal long convolution whose taps are
// generated from positional features by a small MLP, followed by
// multiplicative gating.

#pragma once

#include <cmath>
#include <numbers>

#include "icl_lab/autodiff.hpp"

namespace icl::ad {

/// Sinusoidal features of the lag index, [length, n_features]. Column 0 is the
/// normalised lag; the rest are sin/cos pairs at geometrically spaced frequencies
/// (plus a square-root ramp when n_features is even).
inline Tensor hyena_positional_features(std::size_t length, std::size_t n_features, std::size_t period) {
  Tensor f(Shape{length, n_features});
  const std::size_t pairs = (n_features - 1) / 2;
  for (std::size_t t = 0; t < length; ++t) {
    const double tt = static_cast<double>(t);
    f.at(t, 0) = tt / static_cast<double>(period);
    for (std::size_t p = 0; p < pairs; ++p) {
      const double freq = 2.0 * std::numbers::pi * std::pow(2.0, static_cast<double>(p)) / static_cast<double>(period);
      f.at(t, 1 + 2 * p) = std::sin(freq * tt);
      f.at(t, 2 + 2 * p) = std::cos(freq * tt);
    }
    if (n_features % 2 == 0) f.at(t, n_features - 1) = std::sqrt(tt / static_cast<double>(period));
  }
  return f;
}

/// Exponential decay window exp(-alpha_c * t), [length, channels], with decay
/// rates spread log-uniformly over [0.5 / period, 8 / period].
inline Tensor hyena_decay_window(std::size_t length, std::size_t channels, std::size_t period) {
  Tensor w(Shape{length, channels});
  const double lo = std::log(0.5 / static_cast<double>(period));
  const double hi = std::log(8.0 / static_cast<double>(period));
  for (std::size_t c = 0; c < channels; ++c) {
    const double frac = channels > 1 ? static_cast<double>(c) / static_cast<double>(channels - 1) : 0.0;
    const double alpha = std::exp(lo + frac * (hi - lo));
    for (std::size_t t = 0; t < length; ++t) w.at(t, c) = std::exp(-alpha * static_cast<double>(t));
  }
  return w;
}

/// Implicit filter taps [T, D]: (gelu(features W1 + b1) W2 + b2) * window.
inline Var hyena_filter(Var features, Var w1, Var b1, Var w2, Var b2, Var window) {
  Var hidden = gelu(add(matmul(features, w1), b1));
  return mul(add(matmul(hidden, w2), b2), window);
}

/// gate * causal_conv(v, filter).  v, gate: [B, T, D]; filter: [L, D].
inline Var hyena_operator(Var v, Var filter, Var gate) { return mul(causal_conv(v, filter), gate); }

}  // namespace icl::ad
