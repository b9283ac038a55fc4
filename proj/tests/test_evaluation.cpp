// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <algorithm>
#include <filesystem>
#include <functional>
#include <set>

#include "support.hpp"

using namespace icl;

namespace {

FunctionInstance linear_instance(std::size_t d, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  return sample_linear_task(d, sigma, rng);
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.embed_dim = 16;
  c.max_seq_len = 21;
  c.max_input_dim = 5;
  return c;
}

}  // namespace

TEST(OOD, OrthogonalQueryIsPerpendicularAndKeepsNorm) {
  Rng rng(1);
  const FunctionInstance f = linear_instance(8, 0.1, 2);
  for (int i = 0; i < 200; ++i) {
    const std::size_t k = 1 + i % 7;
    Rng a(100 + i), b(100 + i);
    const Prompt p = ood_prompt_sampler(OODKind::orthogonal, f, k, a);
    for (std::size_t j = 0; j < k; ++j) EXPECT_LT(std::abs(dot(p.query(), p.xs[j])), 1e-10);
    // the raw query is the (k+1)-th gaussian draw of the same stream
    Vec raw;
    for (std::size_t j = 0; j <= k; ++j) raw = sample_input(InputBase::gaussian, 8, b);
    EXPECT_NEAR(norm2(p.query()), norm2(raw), 1e-10);
  }
  Rng r(3);
  EXPECT_THROW(ood_prompt_sampler(OODKind::orthogonal, f, 8, r), ConfigError);
}

TEST(OOD, HalfSubspaceSupport) {
  for (std::size_t d : {1u, 4u, 5u}) {
    const FunctionInstance f = linear_instance(d, 0.1, d);
    Rng rng(4);
    const Prompt p = ood_prompt_sampler(OODKind::half_subspace, f, 10, rng);
    const std::size_t keep = (d + 1) / 2;
    for (std::size_t i = 0; i < 10; ++i)
      for (std::size_t j = keep; j < d; ++j) EXPECT_EQ(p.xs[i][j], 0.0);
    std::size_t nonzero = 0;
    for (double v : p.query()) nonzero += v != 0.0;
    EXPECT_EQ(nonzero, d);
  }
}

TEST(OOD, RandomQuadrantsShareOneOrthant) {
  const FunctionInstance f = linear_instance(6, 0.1, 5);
  bool query_differs = false;
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(50 + trial);
    const Prompt p = ood_prompt_sampler(OODKind::random_quadrants, f, 12, rng);
    for (std::size_t j = 0; j < 6; ++j) {
      const double s = std::copysign(1.0, p.xs[0][j]);
      for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(std::copysign(1.0, p.xs[i][j]), s);
      query_differs |= std::copysign(1.0, p.query()[j]) != s;
    }
  }
  EXPECT_TRUE(query_differs);
}

TEST(OOD, ScaledInputsDoubleUnderTheSameSeed) {
  const FunctionInstance f = linear_instance(4, 0.1, 6);
  Rng a(7), b(7);
  const Prompt s = ood_prompt_sampler(OODKind::scaled, f, 9, a);
  const Prompt u = generate_prompt(f, 9, InputDist::gaussian(), b);
  for (std::size_t i = 0; i <= 9; ++i) EXPECT_NEAR(norm2(s.xs[i]), 2.0 * norm2(u.xs[i]), 1e-12);
  EXPECT_EQ(s.meta.scaling_factor, 2.0);
}

TEST(OOD, NoisyLabelsOnlyInContext) {
  const FunctionInstance f = linear_instance(3, 0.0, 8);
  Rng rng(9);
  double ss = 0.0;
  std::size_t n = 0;
  for (int i = 0; i < 2000; ++i) {
    const Prompt p = ood_prompt_sampler(OODKind::noisy_lr, f, 5, rng);
    EXPECT_NEAR(p.query_target, dot(f.w, p.query()), 1e-12);
    for (std::size_t j = 0; j < 5; ++j, ++n) ss += std::pow(p.ys[j] - dot(f.w, p.xs[j]), 2);
  }
  EXPECT_NEAR(ss / n, 1.0, 0.05);
}

TEST(OOD, SkewedCovarianceMatchesDiagonal) {
  const std::size_t d = 5, n = 100000;
  const Vec var = skewed_variances(d);
  EXPECT_DOUBLE_EQ(var.front(), 1.0);
  EXPECT_NEAR(var.back(), 0.01, 1e-15);
  for (std::size_t j = 1; j < d; ++j) EXPECT_NEAR(var[j] / var[j - 1], std::pow(0.01, 0.25), 1e-12);
  const FunctionInstance f = linear_instance(d, 0.1, 10);
  Rng rng(11);
  std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
  std::size_t count = 0;
  while (count < n) {
    const Prompt p = ood_prompt_sampler(OODKind::skewed, f, 9, rng);
    for (const auto& x : p.xs) {
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) cov[a][b] += x[a] * x[b];
      if (++count == n) break;
    }
  }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) {
      const double est = cov[a][b] / n;
      const double truth = a == b ? var[a] : 0.0;
      // sd of a product estimate: sqrt(var_a var_b (1 + [a == b])) / sqrt(n)
      const double se = std::sqrt(var[a] * var[b] * (a == b ? 2.0 : 1.0) / n);
      EXPECT_NEAR(est, truth, 4.0 * se) << a << "," << b;
    }
}

TEST(OOD, DynamicsSupportIsRestricted) {
  for (auto kind : kAllOODKinds) {
    const bool expected = kind == OODKind::noisy_lr || kind == OODKind::scaled;
    EXPECT_EQ(ood_supported(kind, Family::dynamics), expected) << to_string(kind);
    EXPECT_TRUE(ood_supported(kind, Family::linear));
  }
  Rng rng(12);
  const FunctionInstance f = sample_dynamics_task(DynamicsKind::vdp, 2, 0.1, rng);
  EXPECT_THROW(ood_prompt_sampler(OODKind::orthogonal, f, 3, rng), ConfigError);
  EXPECT_NO_THROW(ood_prompt_sampler(OODKind::scaled, f, 3, rng));
  EXPECT_EQ(ood_kind_from_string("random_quadrants"), OODKind::random_quadrants);
  EXPECT_THROW(ood_kind_from_string("sideways"), ConfigError);
}

TEST(Eval, ZeroColumnNearOneOnNoiselessLinear) {
  TaskConfig t;
  t.noise_sigma = 0.0;
  t.d = 5;
  const EvalReport r = eval_baselines(t, {5}, 4000, 13);
  // per-episode squared targets y^2 = (w.x)^2 ~ chi^2_1: sd sqrt(2)
  EXPECT_NEAR(r.rows[0].baseline(BaselineKind::zero), 1.0, 3.0 * std::sqrt(2.0 / 4000));
  EXPECT_FALSE(r.has_model());
  EXPECT_EQ(r.arch, "none");
}

TEST(Eval, LeastSquaresExactOnceKReachesD) {
  TaskConfig t;
  t.noise_sigma = 0.0;
  t.d = 4;
  const EvalReport r = eval_baselines(t, {1, 2, 3, 4, 5, 8}, 200, 14);
  for (const auto& row : r.rows) {
    if (row.k >= 4) EXPECT_LT(row.baseline(BaselineKind::least_squares), 1e-6) << row.k;
    else EXPECT_GT(row.baseline(BaselineKind::least_squares), 1e-3) << row.k;
    for (double m : row.baseline_mse) EXPECT_GE(m, 0.0);
  }
}

TEST(Eval, DeterministicAndLeavesParametersUntouched) {
  const ModelConfig mc = tiny_model();
  const ModelParams params = init_params(mc, 15);
  const std::uint64_t before = parameter_checksum(params);
  const TaskConfig t;
  const EvalReport a = eval_mse_vs_context(mc, params, t, {1, 5, 10}, 64, 16);
  const EvalReport b = eval_mse_vs_context(mc, params, t, {1, 5, 10}, 64, 16);
  EXPECT_EQ(a, b);
  EXPECT_EQ(report_csv(a), report_csv(b));
  EXPECT_EQ(parameter_checksum(params), before);
  EXPECT_TRUE(a.has_model());
  EXPECT_NE(a, eval_mse_vs_context(mc, params, t, {1, 5, 10}, 64, 17));
}

TEST(Eval, BaselinesMatchModelReportOnSamePrompts) {
  const ModelConfig mc = tiny_model();
  const ModelParams params = init_params(mc, 18);
  const TaskConfig t;
  const EvalReport with = eval_mse_vs_context(mc, params, t, {3, 7}, 50, 19);
  const EvalReport without = eval_baselines(t, {3, 7}, 50, 19);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(with.rows[i].baseline_mse, without.rows[i].baseline_mse);
}

TEST(Eval, ModelStderrFromPerEpisodeErrors) {
  const ModelConfig mc = tiny_model();
  const ModelParams params = init_params(mc, 20);
  const TaskConfig t;
  const EvalReport r = eval_mse_vs_context(mc, params, t, {6}, 40, 21);
  const auto prompts = eval_prompts(t, 6, 40, 21);
  const Vec preds = predict_queries(mc, params, prompts);
  Vec se;
  for (std::size_t i = 0; i < prompts.size(); ++i) se.push_back(std::pow(preds[i] - prompts[i].query_target, 2));
  double m = 0.0;
  for (double v : se) m += v / 40.0;
  double ss = 0.0;
  for (double v : se) ss += (v - m) * (v - m);
  EXPECT_NEAR(*r.rows[0].model_mse, m, 1e-12);
  EXPECT_NEAR(*r.rows[0].model_stderr, std::sqrt(ss / 39.0 / 40.0), 1e-12);
}

TEST(Eval, KBeyondContextIsAnError) {
  const ModelConfig mc = tiny_model();
  const ModelParams params = init_params(mc, 22);
  EXPECT_THROW(eval_mse_vs_context(mc, params, TaskConfig{}, {5, 11}, 10, 0), ConfigError);
  EXPECT_THROW(eval_baselines(TaskConfig{}, {}, 10, 0), ConfigError);
}

TEST(Eval, OodReportsAreLabelled) {
  TaskConfig t;
  t.d = 6;
  const EvalReport r = eval_baselines(t, {2, 4}, 30, 23, OODKind::orthogonal);
  EXPECT_EQ(r.ood_kind, "orthogonal");
  EXPECT_EQ(eval_baselines(t, {2}, 30, 23).ood_kind, "in-distribution");
  EXPECT_THROW(eval_baselines(t, {6}, 30, 23, OODKind::orthogonal), ConfigError);
}

TEST(SignTest, KnownValues) {
  EXPECT_DOUBLE_EQ(sign_test_p_value(0, 0), 1.0);
  EXPECT_NEAR(sign_test_p_value(5, 5), 1.0, 1e-12);
  // P(X <= 0 or X >= 10), X ~ Bin(10, 1/2) = 2 / 1024
  EXPECT_NEAR(sign_test_p_value(10, 0), 2.0 / 1024.0, 1e-15);
  // 2 * (1 + 10 + 45) / 1024
  EXPECT_NEAR(sign_test_p_value(2, 8), 112.0 / 1024.0, 1e-14);
  EXPECT_EQ(sign_test_p_value(2, 8), sign_test_p_value(8, 2));
}

TEST(SignTest, ConstantOffsetIsDetected) {
  Rng rng(24);
  Vec diffs;
  for (int i = 0; i < 200; ++i) {
    const double a = sample_normal(rng), b = sample_normal(rng);
    diffs.push_back((a + 1.0) - b);
  }
  EXPECT_LT(sign_test_p_value(diffs), 0.01);
}

TEST(Paired, IdenticalModelsGiveZeroDifference) {
  const ModelConfig mc = tiny_model();
  const ModelParams p = init_params(mc, 25);
  const PairedReport r = compare_input_scaling(mc, p, mc, p, TaskConfig{}, {2, 6}, 40, 26);
  ASSERT_EQ(r.rows.size(), 2u);
  for (const auto& row : r.rows) {
    EXPECT_EQ(row.diff_mean, 0.0);
    EXPECT_EQ(row.std_mse, row.scaled_mse);
    EXPECT_EQ(row.n_pos + row.n_neg, 0u);
    EXPECT_EQ(row.p_value, 1.0);
    EXPECT_EQ(row.prompts_std, row.prompts_scaled);
  }
}

TEST(Paired, DifferentModelsSharePrompts) {
  const ModelConfig mc = tiny_model();
  const PairedReport r = compare_input_scaling(mc, init_params(mc, 27), mc, init_params(mc, 28), TaskConfig{}, {4}, 60, 29);
  const auto& row = r.rows[0];
  EXPECT_EQ(row.prompts_std, row.prompts_scaled);
  EXPECT_EQ(row.prompts_std, prompts_checksum(eval_prompts(TaskConfig{}, 4, 60, 29)));
  EXPECT_NEAR(row.diff_mean, row.std_mse - row.scaled_mse, 1e-12);
  EXPECT_EQ(row.n_pos + row.n_neg, 60u);
  ModelConfig other = mc;
  other.n_layers = 3;
  EXPECT_THROW(compare_input_scaling(mc, init_params(mc, 1), other, init_params(other, 1), TaskConfig{}, {4}, 10, 0),
               ConfigError);
}

TEST(Paired, ReportCarriesPromptChecksums) {
  const ModelConfig mc = tiny_model();
  const PairedReport r = compare_input_scaling(mc, init_params(mc, 30), mc, init_params(mc, 31), TaskConfig{}, {2, 5}, 20, 32);
  const std::string csv = paired_report_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "k,std_mse,scaled_mse,diff_mean,diff_stderr,n_pos,n_neg,p_value,prompts_std,prompts_scaled");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  const std::string sum = hex64(r.rows[1].prompts_std);
  EXPECT_NE(csv.find("," + sum + "," + sum + "\n"), std::string::npos);
  const auto j = paired_report_json(r);
  EXPECT_EQ(j["rows"][1]["prompts_scaled"], sum);
  EXPECT_EQ(j["metadata"]["ood_kind"], "paired_input_scaling");
}

TEST(Reports, JsonAndCsvRoundTrip) {
  const ModelConfig mc = tiny_model();
  EvalReport r = eval_mse_vs_context(mc, init_params(mc, 30), TaskConfig{}, {1, 4, 9}, 20, 31);
  r.checkpoint_fingerprint = "00ff00ff00ff00ff";
  EXPECT_EQ(report_from_json(nlohmann::json::parse(report_json(r).dump())), r);
  const std::string csv = report_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "k,model_mse,model_stderr,zero_mse,lsq_mse,knn3_mse,avg_mse");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_EQ(rows_from_csv(csv), r.rows);

  const EvalReport b = eval_baselines(TaskConfig{}, {1, 2}, 10, 32);
  const std::string bcsv = report_csv(b);
  EXPECT_EQ(bcsv.substr(0, bcsv.find('\n')), "k,zero_mse,lsq_mse,knn3_mse,avg_mse");
  EXPECT_EQ(rows_from_csv(bcsv), b.rows);
  EXPECT_EQ(report_from_json(report_json(b)), b);
}

TEST(Reports, FilesOnDisk) {
  const auto dir = std::filesystem::temp_directory_path() / "icl_lab_eval_test";
  std::filesystem::create_directories(dir);
  const EvalReport r = eval_baselines(TaskConfig{}, {3}, 10, 33);
  emit_report(r, (dir / "r.json").string(), ReportFormat::json);
  emit_report(r, (dir / "r.csv").string(), ReportFormat::csv);
  EXPECT_EQ(read_report_json((dir / "r.json").string()), r);
  EXPECT_EQ(rows_from_csv(read_text_file((dir / "r.csv").string())), r.rows);
  EXPECT_THROW(read_text_file((dir / "missing.csv").string()), IoError);
  try {
    write_text_file((dir / "no/such/dir/x.csv").string(), "x");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("no/such/dir"), std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST(Reports, FingerprintTracksEveryField) {
  EvalConfig base;
  base.model = tiny_model();
  base.k_values = {1, 5};
  const std::string f0 = base.fingerprint();
  EXPECT_EQ(EvalConfig(base).fingerprint(), f0);
  std::vector<std::function<void(EvalConfig&)>> mutations = {
      [](EvalConfig& e) { e.task.family = Family::gaussian_kernel; },
      [](EvalConfig& e) { e.task.dynamics_kind = DynamicsKind::lorenz; },
      [](EvalConfig& e) { e.task.d = 6; },
      [](EvalConfig& e) { e.task.k = 12; },
      [](EvalConfig& e) { e.task.noise_sigma = 0.2; },
      [](EvalConfig& e) { e.task.num_centers = 21; },
      [](EvalConfig& e) { e.task.bandwidth = 1.0; },
      [](EvalConfig& e) { e.task.input_dist = InputBase::uniform_cube; },
      [](EvalConfig& e) { e.task.input_scale = 2.0; },
      [](EvalConfig& e) { e.task.normalize = NormalizeLabels::off; },
      [](EvalConfig& e) { e.task.poly_spectral_norm = 0.8; },
      [](EvalConfig& e) { e.task.poly_cubic = true; },
      [](EvalConfig& e) { e.task.duffing_continuous_time = false; },
      [](EvalConfig& e) { e.model->arch = Arch::transformer_blockwise; },
      [](EvalConfig& e) { e.model->n_layers = 3; },
      [](EvalConfig& e) { e.model->n_heads = 4; },
      [](EvalConfig& e) { e.model->embed_dim = 32; },
      [](EvalConfig& e) { e.model->max_seq_len = 25; },
      [](EvalConfig& e) { e.model->max_input_dim = 6; },
      [](EvalConfig& e) { e.model->mlp_ratio = 2; },
      [](EvalConfig& e) { e.model->block_size = 3; },
      [](EvalConfig& e) { e.model->filter_order = 7; },
      [](EvalConfig& e) { e.model->filter_features = 9; },
      [](EvalConfig& e) { e.model->state_dim = 5; },
      [](EvalConfig& e) { e.model->ssm_expand = 3; },
      [](EvalConfig& e) { e.model->conv_width = 2; },
      [](EvalConfig& e) { e.model->zero_head = true; },
      [](EvalConfig& e) { e.model.reset(); },
      [](EvalConfig& e) { e.k_values = {1, 6}; },
      [](EvalConfig& e) { e.n_episodes = 499; },
      [](EvalConfig& e) { e.base_seed = 1; },
      [](EvalConfig& e) { e.ood = OODKind::scaled; },
      [](EvalConfig& e) { e.ood_options.scale_factor = 3.0; },
      [](EvalConfig& e) { e.ood_options.extra_noise_sigma = 0.5; },
      [](EvalConfig& e) { e.ood_options.skew_ratio = 10.0; },
  };
  std::set<std::string> seen{f0};
  for (std::size_t i = 0; i < mutations.size(); ++i) {
    EvalConfig e = base;
    mutations[i](e);
    const std::string f = e.fingerprint();
    EXPECT_NE(f, f0) << "mutation " << i;
    seen.insert(f);
  }
  EXPECT_EQ(seen.size(), mutations.size() + 1);
}
