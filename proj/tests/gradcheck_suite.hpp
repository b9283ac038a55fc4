// SPDX-License-Identifier: Apache-2.0
//
// Gradient-check cases shared by the unit suite and the acceptance binary.

#pragma once

#include <string>
#include <vector>

#include "support.hpp"

namespace icl_test {

struct GradCase {
  std::string name;
  GraphFn f;
  std::vector<Tensor> inputs;
};

/// One or more finite-difference cases for every differentiable primitive.
inline std::vector<GradCase> primitive_cases() {
  using namespace icl;
  using namespace icl::ad;
  std::vector<GradCase> cs;
  auto wrap = [](std::uint64_t seed, auto op) {
    return GraphFn([seed, op](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, op(t, v), seed); });
  };

  Rng rng(21);
  const Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4}), row = random_tensor(rng, {4});
  cs.push_back({"add", wrap(1, [](Tape&, const std::vector<Var>& v) { return add(v[0], v[1]); }), {a, b}});
  cs.push_back({"sub", wrap(2, [](Tape&, const std::vector<Var>& v) { return sub(v[0], v[1]); }), {a, b}});
  cs.push_back({"mul", wrap(3, [](Tape&, const std::vector<Var>& v) { return mul(v[0], v[1]); }), {a, b}});
  cs.push_back({"mul_broadcast", wrap(4, [](Tape&, const std::vector<Var>& v) { return mul(v[0], v[1]); }), {a, row}});
  cs.push_back({"add_broadcast", wrap(5, [](Tape&, const std::vector<Var>& v) { return add(v[0], v[1]); }), {a, row}});
  cs.push_back({"scale", wrap(6, [](Tape&, const std::vector<Var>& v) { return scale(v[0], -1.7); }), {a}});
  cs.push_back({"add_scalar", wrap(7, [](Tape&, const std::vector<Var>& v) { return add_scalar(v[0], 0.3); }), {a}});

  Tensor smooth = random_tensor(rng, {4, 5});
  for (auto& v : smooth.data()) v += v >= 0 ? 0.1 : -0.1;  // keep relu away from its kink
  using U = Var (*)(Var);
  const std::vector<std::pair<const char*, U>> unary = {
      {"tanh", [](Var x) { return ad::tanh(x); }},       {"exp", [](Var x) { return ad::exp(x); }},
      {"square", [](Var x) { return square(x); }},       {"gelu", [](Var x) { return gelu(x); }},
      {"sigmoid", [](Var x) { return sigmoid(x); }},     {"softplus", [](Var x) { return softplus(x); }},
      {"silu", [](Var x) { return silu(x); }},           {"relu", [](Var x) { return relu(x); }},
      {"softmax", [](Var x) { return softmax_last(x); }}, {"layer_norm", [](Var x) { return layer_norm_last(x); }},
  };
  for (const auto& [name, op] : unary)
    cs.push_back({name, wrap(8, [op](Tape&, const std::vector<Var>& v) { return op(v[0]); }), {smooth}});

  const Tensor t3 = random_tensor(rng, {2, 3, 4}), t3b = random_tensor(rng, {2, 2, 4});
  cs.push_back({"reshape", wrap(1, [](Tape&, const std::vector<Var>& v) { return reshape(v[0], {6, 4}); }), {t3}});
  cs.push_back({"slice", wrap(2, [](Tape&, const std::vector<Var>& v) { return slice(v[0], 1, 1, 2); }), {t3}});
  cs.push_back({"slice_last", wrap(3, [](Tape&, const std::vector<Var>& v) { return slice(v[0], -1, 0, 3); }), {t3}});
  cs.push_back({"concat", wrap(4, [](Tape&, const std::vector<Var>& v) { return concat({v[0], v[1]}, 1); }), {t3, t3b}});
  cs.push_back({"permute", wrap(5, [](Tape&, const std::vector<Var>& v) { return permute(v[0], {2, 0, 1}); }), {t3}});
  cs.push_back({"transpose_last2", wrap(6, [](Tape&, const std::vector<Var>& v) { return transpose_last2(v[0]); }), {t3}});
  cs.push_back({"gather", wrap(7, [](Tape&, const std::vector<Var>& v) { return gather(v[0], 1, {2, 0, 2}); }), {t3}});
  cs.push_back({"reduce_mean", [](Tape&, const std::vector<Var>& v) { return reduce_mean(square(v[0])); }, {t3}});
  cs.push_back({"reduce_sum", [](Tape&, const std::vector<Var>& v) { return reduce_sum(ad::tanh(v[0])); }, {t3}});

  const Tensor w = random_tensor(rng, {4, 5}), bm = random_tensor(rng, {2, 4, 2}), sq = random_tensor(rng, {2, 4, 4});
  cs.push_back({"matmul_shared_rhs", wrap(1, [](Tape&, const std::vector<Var>& v) { return matmul(v[0], v[1]); }), {t3, w}});
  cs.push_back({"matmul_batched", wrap(2, [](Tape&, const std::vector<Var>& v) { return matmul(v[0], v[1]); }), {t3, bm}});
  cs.push_back({"causal_mask_softmax",
                wrap(3, [](Tape&, const std::vector<Var>& v) { return softmax_last(causal_mask(v[0])); }), {sq}});

  const Tensor u = random_tensor(rng, {2, 6, 3}), filt = random_tensor(rng, {4, 3});
  cs.push_back({"causal_conv", wrap(1, [](Tape&, const std::vector<Var>& v) { return causal_conv(v[0], v[1]); }), {u, filt}});
  const Tensor abar = random_uniform_tensor(rng, {2, 5, 3, 2}, 0.2, 0.95), bbar = random_tensor(rng, {2, 5, 3, 2});
  const Tensor c = random_tensor(rng, {2, 5, 2}), uu = random_tensor(rng, {2, 5, 3});
  cs.push_back({"selective_scan",
                wrap(2, [](Tape&, const std::vector<Var>& v) { return selective_scan(v[0], v[1], v[2], v[3]); }),
                {abar, bbar, c, uu}});
  const Tensor delta = random_uniform_tensor(rng, {2, 5, 3}, 0.05, 1.0), am = random_uniform_tensor(rng, {3, 2}, 0.5, 2.0);
  const Tensor bproj = random_tensor(rng, {2, 5, 2});
  cs.push_back({"selective_scan_zoh",
                wrap(3, [](Tape&, const std::vector<Var>& v) { return selective_scan_zoh(v[0], v[1], v[2], v[3], v[4]); }),
                {delta, am, bproj, c, uu}});

  const Tensor q = random_tensor(rng, {2, 7, 4}), k = random_tensor(rng, {2, 7, 4}), vv = random_tensor(rng, {2, 7, 4});
  cs.push_back({"causal_attention",
                wrap(4, [](Tape&, const std::vector<Var>& v) { return causal_attention(v[0], v[1], v[2]); }), {q, k, vv}});
  for (std::size_t bs : {1u, 3u, 7u}) {
    cs.push_back({"blockwise_attention_bs" + std::to_string(bs),
                  wrap(5, [bs](Tape&, const std::vector<Var>& v) { return blockwise_attention(v[0], v[1], v[2], bs); }),
                  {q, k, vv}});
  }

  const Tensor feats = hyena_positional_features(6, 5, 16), window = hyena_decay_window(6, 3, 16);
  const Tensor w1 = random_tensor(rng, {5, 8}), b1 = random_tensor(rng, {8}), w2 = random_tensor(rng, {8, 3}),
               b2 = random_tensor(rng, {3});
  const Tensor gate = random_tensor(rng, {2, 6, 3});
  cs.push_back({"hyena_filter_operator",
                wrap(6,
                     [feats, window](Tape& t, const std::vector<Var>& v) {
                       Var f = hyena_filter(t.constant(feats), v[0], v[1], v[2], v[3], t.constant(window));
                       return hyena_operator(v[4], f, v[5]);
                     }),
                {w1, b1, w2, b2, u, gate}});
  return cs;
}

/// A random chain of primitives over two [r, c] leaves and one [c, c] leaf.
inline Var random_graph(Tape& t, const std::vector<Var>& v, std::uint64_t seed) {
  using namespace icl::ad;
  icl::Rng rng(seed);
  auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng() % n); };
  Var x = v[0];
  const std::size_t depth = 3 + pick(4);
  for (std::size_t i = 0; i < depth; ++i) {
    switch (pick(14)) {
      case 0: x = icl::ad::tanh(x); break;
      case 1: x = gelu(x); break;
      case 2: x = softmax_last(x); break;
      case 3: x = layer_norm_last(x); break;
      case 4: x = add(x, v[1]); break;
      case 5: x = mul(x, v[1]); break;
      case 6: x = sub(x, scale(v[1], 0.5)); break;
      case 7: x = matmul(x, v[2]); break;
      case 8: x = sigmoid(x); break;
      case 9: x = silu(x); break;
      case 10: x = icl::ad::exp(scale(icl::ad::tanh(x), 0.5)); break;
      case 11: {
        const std::size_t cols = x.shape()[1];
        x = concat({slice(x, 1, cols / 2, cols - cols / 2), slice(x, 1, 0, cols / 2)}, 1);
        break;
      }
      case 12: x = transpose_last2(matmul(v[2], transpose_last2(x))); break;
      default: x = softplus(square(x)); break;
    }
  }
  return add(weighted_sum(t, x, seed ^ 0xABCDEFULL), reduce_mean(square(x)));
}

/// Worst relative error over `count` random graphs.
inline std::vector<double> random_graph_errors(std::size_t count) {
  icl::Rng rng(31);
  std::vector<double> errs;
  for (std::uint64_t g = 0; g < count; ++g) {
    const std::size_t r = 2 + rng() % 3, c = 2 + rng() % 4;
    const std::vector<Tensor> inputs = {random_tensor(rng, {r, c}), random_tensor(rng, {r, c}),
                                        random_tensor(rng, {c, c}, 0.7)};
    const GraphFn f = [g](Tape& t, const std::vector<Var>& v) { return random_graph(t, v, 1000 + g); };
    errs.push_back(worst_relative_error(f, inputs));
  }
  return errs;
}

/// Two-layer, 16-wide instance of an architecture.
inline icl::ModelConfig gradcheck_model(icl::Arch arch) {
  icl::ModelConfig c;
  c.arch = arch;
  c.embed_dim = 16;
  c.n_layers = 2;
  c.n_heads = arch == icl::Arch::transformer || arch == icl::Arch::transformer_blockwise ? 2 : 0;
  c.max_seq_len = 9;
  c.max_input_dim = 3;
  c.mlp_ratio = 2;
  c.block_size = 2;
  c.filter_order = 6;
  c.filter_features = 5;
  c.state_dim = 3;
  c.ssm_expand = 2;
  c.conv_width = 3;
  c.validate();
  return c;
}

struct EndToEndError {
  double global = 0.0;      // max |a - n| / max |n| over all parameters
  double per_tensor = 0.0;  // worst per-tensor relative error
};

inline EndToEndError end_to_end_error(icl::Arch arch, icl::LossMode mode) {
  using namespace icl;
  const ModelConfig c = gradcheck_model(arch);
  // larger-than-default weights so every path carries signal
  ModelParams params = init_params(c, 5);
  Rng rng(77);
  for (auto& [name, t] : params)
    if (name.find("a_log") == std::string::npos && name.find("dt_up.b") == std::string::npos)
      for (auto& v : t.data()) v += 0.2 * sample_normal(rng);
  std::vector<Prompt> prompts;
  for (std::uint64_t i = 0; i < 2; ++i) {
    Rng r(100 + i);
    prompts.push_back(generate_prompt(sample_linear_task(3, 0.1, r), 4, InputDist::gaussian(), r));
  }
  const PromptBatch b = make_prompt_batch(prompts, c);
  std::vector<std::string> names;
  std::vector<Tensor> inputs;
  for (const auto& [n, t] : params) names.push_back(n), inputs.push_back(t);
  const GraphFn f = [&](Tape& tape, const std::vector<Var>& v) {
    ParamVars pv;
    for (std::size_t i = 0; i < v.size(); ++i) pv.emplace(names[i], v[i]);
    if (mode == LossMode::query_only) {
      Var preds = forward_predictions(tape, c, pv, b, ReadPositions::query_only);
      return mse_loss(preds, tape.constant(Tensor(Shape{b.batch, 1}, b.query_targets)));
    }
    Var preds = forward_predictions(tape, c, pv, b, ReadPositions::every_x);
    return mse_loss(preds, tape.constant(b.all_targets));
  };
  const auto a = analytic_grads(f, inputs);
  const auto n = numeric_grads(f, inputs);
  EndToEndError e;
  double scale = 1e-8, diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    e.per_tensor = std::max(e.per_tensor, relative_error(a[i], n[i], 1e-6));
    for (std::size_t j = 0; j < a[i].size(); ++j) {
      diff = std::max(diff, std::abs(a[i][j] - n[i][j]));
      scale = std::max(scale, std::abs(n[i][j]));
    }
  }
  e.global = diff / scale;
  return e;
}

}  // namespace icl_test
