// SPDX-License-Identifier: Apache-2.0
//
// Test-side oracles: central finite differences and small helpers.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "icl_lab.hpp"

namespace icl_test {

using icl::Shape;
using icl::Tensor;
using icl::ad::Tape;
using icl::ad::Var;

/// f builds a scalar from leaves bound to `inputs` on a fresh tape.
using GraphFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double eval_scalar(const GraphFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t, false));
  return f(tape, vars).value().item();
}

inline std::vector<Tensor> analytic_grads(const GraphFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
  Var out = f(tape, vars);
  tape.backward(out);
  std::vector<Tensor> g;
  for (const auto& v : vars) g.push_back(tape.grad(v).value_or(Tensor(v.shape())));
  return g;
}

/// Central differences, step h, for every entry of every input.
inline std::vector<Tensor> numeric_grads(const GraphFn& f, const std::vector<Tensor>& inputs, double h = 1e-5) {
  std::vector<Tensor> grads;
  std::vector<Tensor> x = inputs;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor g(x[i].shape());
    for (std::size_t j = 0; j < x[i].size(); ++j) {
      const double orig = x[i][j];
      x[i][j] = orig + h;
      const double fp = eval_scalar(f, x);
      x[i][j] = orig - h;
      const double fm = eval_scalar(f, x);
      x[i][j] = orig;
      g[j] = (fp - fm) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

/// max_i |a_i - n_i| / max(max_i |n_i|, floor): relative error in the infinity norm.
inline double relative_error(const Tensor& analytic, const Tensor& numeric, double floor = 1e-8) {
  double num = 0.0, den = floor;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    num = std::max(num, std::abs(analytic[i] - numeric[i]));
    den = std::max(den, std::abs(numeric[i]));
  }
  return num / den;
}

inline double worst_relative_error(const GraphFn& f, const std::vector<Tensor>& inputs, double h = 1e-5) {
  const auto a = analytic_grads(f, inputs);
  const auto n = numeric_grads(f, inputs, h);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a[i], n[i]));
  return worst;
}

inline Tensor random_tensor(icl::Rng& rng, Shape shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = scale * icl::sample_normal(rng);
  return t;
}

inline Tensor random_uniform_tensor(icl::Rng& rng, Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = icl::sample_uniform(rng, lo, hi);
  return t;
}

/// Weighted sum with fixed random weights, so every output entry matters.
inline Var weighted_sum(Tape& tape, Var y, std::uint64_t seed) {
  icl::Rng rng(seed);
  return icl::ad::reduce_sum(icl::ad::mul(y, tape.constant(random_tensor(rng, y.shape()))));
}

}  // namespace icl_test
