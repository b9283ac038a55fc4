// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace icl;
using namespace icl::ad;
using icl_test::random_tensor;
using icl_test::random_uniform_tensor;

TEST(CausalConv, MatchesLoopOracle) {
  Rng rng(1);
  const Tensor u = random_tensor(rng, {2, 9, 3}), f = random_tensor(rng, {4, 3});
  Tape tape;
  const Tensor y = causal_conv(tape.constant(u), tape.constant(f)).value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 9; ++t)
      for (std::size_t d = 0; d < 3; ++d) {
        double s = 0.0;
        for (std::size_t l = 0; l < 4 && l <= t; ++l) s += f.at(l, d) * u[((b * 9) + t - l) * 3 + d];
        EXPECT_NEAR(y[(b * 9 + t) * 3 + d], s, 1e-14);
      }
}

TEST(Hyena, ImpulseAtLagZeroWithUnitGateIsIdentity) {
  Rng rng(2);
  const Tensor u = random_tensor(rng, {1, 6, 4});
  Tensor f(Shape{6, 4});
  for (std::size_t d = 0; d < 4; ++d) f.at(0, d) = 1.0;
  Tape tape;
  const Tensor y = hyena_operator(tape.constant(u), tape.constant(f), tape.constant(Tensor(u.shape(), 1.0))).value();
  EXPECT_EQ(y, u);
}

TEST(Hyena, ImpulseAtLagOneShifts) {
  Rng rng(3);
  const Tensor u = random_tensor(rng, {1, 6, 2});
  Tensor f(Shape{6, 2});
  f.at(1, 0) = f.at(1, 1) = 1.0;
  Tape tape;
  const Tensor y = hyena_operator(tape.constant(u), tape.constant(f), tape.constant(Tensor(u.shape(), 1.0))).value();
  for (std::size_t d = 0; d < 2; ++d) {
    EXPECT_EQ(y[d], 0.0);
    for (std::size_t t = 1; t < 6; ++t) EXPECT_EQ(y[t * 2 + d], u[(t - 1) * 2 + d]);
  }
}

TEST(Hyena, PerturbationOnlyAffectsLaterPositions) {
  Rng rng(4);
  const Tensor u = random_tensor(rng, {1, 10, 3}), f = random_tensor(rng, {10, 3}), g = random_tensor(rng, {1, 10, 3});
  Tape tape;
  const Tensor y0 = hyena_operator(tape.constant(u), tape.constant(f), tape.constant(g)).value();
  for (std::size_t t = 0; t < 10; ++t) {
    Tensor u2 = u;
    u2[t * 3 + 1] += 0.37;
    const Tensor y1 = hyena_operator(tape.constant(u2), tape.constant(f), tape.constant(g)).value();
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t d = 0; d < 3; ++d) EXPECT_EQ(y1[s * 3 + d], y0[s * 3 + d]);
    EXPECT_NE(y1[t * 3 + 1], y0[t * 3 + 1]);
  }
}

TEST(Hyena, WindowDecaysAndFeaturesAreBounded) {
  const Tensor w = hyena_decay_window(20, 5, 20);
  for (std::size_t c = 0; c < 5; ++c) {
    EXPECT_EQ(w.at(0, c), 1.0);
    for (std::size_t t = 1; t < 20; ++t) EXPECT_LT(w.at(t, c), w.at(t - 1, c));
  }
  const Tensor f = hyena_positional_features(20, 7, 20);
  EXPECT_EQ(f.shape(), (Shape{20, 7}));
  for (std::size_t t = 0; t < 20; ++t)
    for (std::size_t j = 1; j < 7; ++j) EXPECT_LE(std::abs(f.at(t, j)), 1.0);
}

namespace {

/// Reference recurrence written per step.
Tensor scan_oracle(const Tensor& abar, const Tensor& bbar, const Tensor& c, const Tensor& u) {
  const std::size_t B = u.shape()[0], T = u.shape()[1], D = u.shape()[2], N = c.shape()[2];
  Tensor y(u.shape());
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> h(D * N, 0.0);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t d = 0; d < D; ++d) {
        double acc = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t i = ((b * T + t) * D + d) * N + n;
          h[d * N + n] = abar[i] * h[d * N + n] + bbar[i] * u[(b * T + t) * D + d];
          acc += c[(b * T + t) * N + n] * h[d * N + n];
        }
        y[(b * T + t) * D + d] = acc;
      }
  }
  return y;
}

}  // namespace

TEST(SelectiveScan, MatchesStepLoopOracle) {
  Rng rng(5);
  const Tensor abar = random_uniform_tensor(rng, {2, 32, 3, 4}, 0.0, 1.0), bbar = random_tensor(rng, {2, 32, 3, 4});
  const Tensor c = random_tensor(rng, {2, 32, 4}), u = random_tensor(rng, {2, 32, 3});
  Tape tape;
  const Tensor y = selective_scan(tape.constant(abar), tape.constant(bbar), tape.constant(c), tape.constant(u)).value();
  EXPECT_LT(max_abs_diff(y, scan_oracle(abar, bbar, c, u)), 1e-12);
}

TEST(SelectiveScan, ZeroTransitionIsMemoryless) {
  Rng rng(6);
  const Tensor bbar = random_tensor(rng, {1, 5, 2, 3}), c = random_tensor(rng, {1, 5, 3}), u = random_tensor(rng, {1, 5, 2});
  Tape tape;
  const Tensor y = selective_scan(tape.constant(Tensor(bbar.shape())), tape.constant(bbar), tape.constant(c), tape.constant(u)).value();
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t d = 0; d < 2; ++d) {
      double s = 0.0;
      for (std::size_t n = 0; n < 3; ++n) s += c[t * 3 + n] * bbar[(t * 2 + d) * 3 + n] * u[t * 2 + d];
      EXPECT_NEAR(y[t * 2 + d], s, 1e-15);
    }
}

TEST(SelectiveScan, UnitCoefficientsGiveCumulativeSum) {
  Tape tape;
  const Tensor one(Shape{1, 3, 1, 1}, 1.0);
  const Tensor y = selective_scan(tape.constant(one), tape.constant(one), tape.constant(Tensor(Shape{1, 3, 1}, 1.0)),
                                  tape.constant(Tensor(Shape{1, 3, 1}, 1.0)))
                       .value();
  EXPECT_EQ(y, Tensor(Shape{1, 3, 1}, std::vector<double>{1.0, 2.0, 3.0}));
}

TEST(SelectiveScan, FusedZohEqualsGeneralScan) {
  Rng rng(7);
  const std::size_t B = 2, T = 32, D = 3, N = 4;
  const Tensor delta = random_uniform_tensor(rng, {B, T, D}, 0.01, 1.0), a = random_uniform_tensor(rng, {D, N}, 0.5, 4.0);
  const Tensor b = random_tensor(rng, {B, T, N}), c = random_tensor(rng, {B, T, N}), u = random_tensor(rng, {B, T, D});
  Tensor abar(Shape{B, T, D, N}), bbar(Shape{B, T, D, N});
  for (std::size_t bt = 0; bt < B * T; ++bt)
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t n = 0; n < N; ++n) {
        abar[(bt * D + d) * N + n] = std::exp(-delta[bt * D + d] * a.at(d, n));
        bbar[(bt * D + d) * N + n] = delta[bt * D + d] * b[bt * N + n];
      }
  Tape tape;
  const Tensor fused =
      selective_scan_zoh(tape.constant(delta), tape.constant(a), tape.constant(b), tape.constant(c), tape.constant(u)).value();
  EXPECT_LT(max_abs_diff(fused, scan_oracle(abar, bbar, c, u)), 1e-12);
}

TEST(SelectiveScan, RejectsShapeMismatch) {
  Tape tape;
  Var x = tape.constant(Tensor(Shape{1, 4, 2, 3}));
  EXPECT_THROW(selective_scan(x, x, tape.constant(Tensor(Shape{1, 4, 2})), tape.constant(Tensor(Shape{1, 4, 2}))), ShapeError);
}

// ---------------------------------------------------------------------------
// Whole-model causality

class ModelCausality : public ::testing::TestWithParam<Arch> {};

TEST_P(ModelCausality, HiddenStateAtTIgnoresLaterTokens) {
  ModelConfig c = model_detail::raw_preset(GetParam());
  c.embed_dim = 16;
  c.max_seq_len = 15;
  c.max_input_dim = 4;
  c.filter_order = 8;
  c.block_size = 3;
  c.validate();
  const ModelParams params = init_params(c, 3);
  Rng rng(9);
  FunctionInstance f = sample_linear_task(4, 0.1, rng);
  const Prompt p = generate_prompt(f, 7, InputDist::gaussian(), rng);
  auto hidden = [&](const Prompt& q) {
    Tape tape;
    ParamVars pv = bind_params(tape, params, false);
    return forward_hidden(tape, c, pv, make_prompt_batch({q}, c)).value();
  };
  const Tensor h0 = hidden(p);
  const std::size_t T = 15, E = c.embed_dim;
  for (std::size_t pos = 0; pos < T; ++pos) {
    Prompt q = p;
    if (pos % 2 == 0) q.xs[pos / 2][1] += 0.5;
    else q.ys[pos / 2] += 0.5;
    const Tensor h1 = hidden(q);
    for (std::size_t t = 0; t < pos; ++t)
      for (std::size_t e = 0; e < E; ++e) ASSERT_EQ(h1[t * E + e], h0[t * E + e]) << "pos " << pos << " t " << t;
    double change = 0.0;
    for (std::size_t e = 0; e < E; ++e) change += std::abs(h1[pos * E + e] - h0[pos * E + e]);
    EXPECT_GT(change, 0.0) << "pos " << pos;
  }
}

INSTANTIATE_TEST_SUITE_P(Architectures, ModelCausality,
                         ::testing::Values(Arch::transformer, Arch::transformer_blockwise, Arch::hyena, Arch::ssm),
                         [](const auto& info) { return std::string(to_string(info.param)); });
