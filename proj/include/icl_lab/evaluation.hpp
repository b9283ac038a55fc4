// SPDX-License-Identifier: Apache-2.0
//
// MSE-vs-context evaluation, out-of-distribution prompt samplers, paired
// input-scaling comparison and CSV/JSON report emission.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icl_lab/baselines.hpp"
#include "icl_lab/episodes.hpp"
#include "icl_lab/model.hpp"
#include "icl_lab/training.hpp"

namespace icl {

// ---------------------------------------------------------------------------
// OOD prompts

enum class OODKind { half_subspace, noisy_lr, orthogonal, random_quadrants, scaled, skewed };

inline constexpr std::array<OODKind, 6> kAllOODKinds{OODKind::half_subspace, OODKind::noisy_lr,
                                                     OODKind::orthogonal,    OODKind::random_quadrants,
                                                     OODKind::scaled,        OODKind::skewed};

inline std::string_view to_string(OODKind k) {
  switch (k) {
    case OODKind::half_subspace: return "half_subspace";
    case OODKind::noisy_lr: return "noisy_lr";
    case OODKind::orthogonal: return "orthogonal";
    case OODKind::random_quadrants: return "random_quadrants";
    case OODKind::scaled: return "scaled";
    case OODKind::skewed: return "skewed";
  }
  return "?";
}

inline OODKind ood_kind_from_string(std::string_view s) {
  for (OODKind k : kAllOODKinds)
    if (to_string(k) == s) return k;
  throw ConfigError("unknown OOD kind '" + std::string(s) + "'");
}

inline constexpr std::string_view kInDistribution = "in-distribution";

struct OODOptions {
  double scale_factor = 2.0;
  double extra_noise_sigma = 1.0;
  double skew_ratio = 100.0;
};

/// Diagonal variances of the skewed distribution: geometric from 1 to 1/skew_ratio.
inline Vec skewed_variances(std::size_t d, double skew_ratio = 100.0) {
  Vec v(d, 1.0);
  for (std::size_t i = 1; i < d; ++i) {
    v[i] = std::pow(skew_ratio, -static_cast<double>(i) / static_cast<double>(d - 1));
  }
  return v;
}

inline bool ood_supported(OODKind kind, Family family) {
  if (family != Family::dynamics) return true;
  return kind == OODKind::noisy_lr || kind == OODKind::scaled;
}

namespace eval_detail {

inline Prompt labelled(const FunctionInstance& f, std::vector<Vec> xs, Rng& rng, double scale) {
  Prompt p;
  p.k = xs.size() - 1;
  p.meta.family = f.family;
  p.meta.d = f.d;
  p.meta.scaling_factor = scale;
  p.xs = std::move(xs);
  for (std::size_t i = 0; i < p.k; ++i) p.ys.push_back(eval_function(f, p.xs[i], rng));
  p.query_target = eval_function(f, p.xs[p.k], rng);
  return p;
}

/// Removes the component of q in span(basis), twice for numerical safety.
inline Vec project_out(const Vec& q, const std::vector<Vec>& basis) {
  const std::size_t d = q.size();
  Eigen::MatrixXd M(d, static_cast<Eigen::Index>(basis.size()));
  for (std::size_t j = 0; j < basis.size(); ++j)
    for (std::size_t i = 0; i < d; ++i) M(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = basis[j][i];
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(M);
  const Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), M.cols());
  Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(q.data(), static_cast<Eigen::Index>(d));
  for (int pass = 0; pass < 2; ++pass) v -= Q * (Q.transpose() * v);
  return Vec(v.data(), v.data() + v.size());
}

}  // namespace eval_detail

/// One OOD prompt for `f` with k context pairs. `base` is the family's usual
/// i.i.d. input sampler.
inline Prompt ood_prompt_sampler(OODKind kind, const FunctionInstance& f, std::size_t k, Rng& rng,
                                 InputBase base = InputBase::gaussian, const OODOptions& opts = {}) {
  if (k < 1) throw ConfigError("OOD prompts need k >= 1");
  if (!ood_supported(kind, f.family)) {
    throw ConfigError("OOD kind " + std::string(to_string(kind)) + " is not defined for " +
                      std::string(to_string(f.family)) + " tasks");
  }
  if (f.family == Family::dynamics) {
    if (kind == OODKind::scaled) return generate_prompt(f, k, InputDist{InputBase::trajectory, opts.scale_factor}, rng);
    Prompt p = generate_prompt(f, k, InputDist::trajectory(), rng);
    for (auto& y : p.ys) y += opts.extra_noise_sigma * sample_normal(rng);
    return p;
  }
  if (base == InputBase::trajectory) throw ConfigError("i.i.d. OOD prompts need a non-trajectory input base");
  const std::size_t d = f.d;
  switch (kind) {
    case OODKind::scaled: return generate_prompt(f, k, InputDist{base, opts.scale_factor}, rng);
    case OODKind::noisy_lr: {
      Prompt p = generate_prompt(f, k, InputDist{base, 1.0}, rng);
      for (auto& y : p.ys) y += opts.extra_noise_sigma * sample_normal(rng);
      return p;
    }
    case OODKind::half_subspace: {
      const std::size_t keep = (d + 1) / 2;
      std::vector<Vec> xs;
      for (std::size_t i = 0; i <= k; ++i) {
        Vec x = sample_input(base, d, rng);
        if (i < k) std::fill(x.begin() + static_cast<std::ptrdiff_t>(keep), x.end(), 0.0);
        xs.push_back(std::move(x));
      }
      return eval_detail::labelled(f, std::move(xs), rng, 1.0);
    }
    case OODKind::orthogonal: {
      if (k >= d) throw ConfigError("orthogonal prompts need k < d (k=" + std::to_string(k) + ", d=" + std::to_string(d) + ")");
      std::vector<Vec> xs;
      for (std::size_t i = 0; i <= k; ++i) xs.push_back(sample_input(base, d, rng));
      const double n0 = norm2(xs[k]);
      Vec q = eval_detail::project_out(xs[k], std::vector<Vec>(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(k)));
      const double n1 = norm2(q);
      if (!(n1 > 0.0)) throw Error("orthogonal projection of the query vanished");
      for (auto& v : q) v *= n0 / n1;
      xs[k] = std::move(q);
      return eval_detail::labelled(f, std::move(xs), rng, 1.0);
    }
    case OODKind::random_quadrants: {
      auto signs = [&] {
        Vec s(d);
        for (auto& v : s) v = sample_uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0;
        return s;
      };
      const Vec s_ctx = signs();
      const Vec s_query = signs();
      std::vector<Vec> xs;
      for (std::size_t i = 0; i <= k; ++i) {
        Vec x = sample_input(base, d, rng);
        const Vec& s = i < k ? s_ctx : s_query;
        for (std::size_t j = 0; j < d; ++j) x[j] = std::abs(x[j]) * s[j];
        xs.push_back(std::move(x));
      }
      return eval_detail::labelled(f, std::move(xs), rng, 1.0);
    }
    case OODKind::skewed: {
      const Vec var = skewed_variances(d, opts.skew_ratio);
      std::vector<Vec> xs;
      for (std::size_t i = 0; i <= k; ++i) {
        Vec x = sample_normal_vec(rng, d);
        for (std::size_t j = 0; j < d; ++j) x[j] *= std::sqrt(var[j]);
        xs.push_back(std::move(x));
      }
      return eval_detail::labelled(f, std::move(xs), rng, 1.0);
    }
  }
  throw Error("unreachable OOD kind");
}

/// Evaluation episode: instance then prompt from the episode stream, with
/// optional OOD construction. Diverged dynamics are redrawn as in training.
inline Prompt sample_eval_episode(const TaskConfig& cfg, std::size_t k, const EpisodeSeed& seed,
                                  std::optional<OODKind> ood, const OODOptions& opts = {}) {
  if (!ood) return sample_episode(cfg, cfg.d, k, seed);
  Rng rng = seed.rng();
  const std::size_t d = cfg.episode_dim(cfg.d);
  for (int attempt = 0;; ++attempt) {
    FunctionInstance f = sample_instance(cfg, d, rng);
    try {
      Prompt p = ood_prompt_sampler(*ood, f, k, rng, cfg.input().base, opts);
      p.meta.seed = seed.stream_seed();
      return p;
    } catch (const DivergenceError&) {
      if (attempt + 1 >= kMaxDivergenceRedraws) throw;
    }
  }
}

/// n_episodes prompts at context length k, normalised as one batch for kernel tasks.
inline std::vector<Prompt> eval_prompts(const TaskConfig& cfg, std::size_t k, std::size_t n_episodes,
                                        std::uint64_t base_seed, std::optional<OODKind> ood = std::nullopt,
                                        const OODOptions& opts = {}) {
  std::vector<Prompt> out;
  out.reserve(n_episodes);
  const std::uint64_t group_seed = mix_seed(base_seed, k);
  for (std::size_t i = 0; i < n_episodes; ++i) out.push_back(sample_eval_episode(cfg, k, {group_seed, i}, ood, opts));
  if (cfg.normalizes() && !out.empty()) {
    normalize_outputs_batch(out, cfg.normalize == NormalizeLabels::pooled ? NormalizationMode::pooled
                                                                          : NormalizationMode::per_prompt);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
};

/// Mean and standard error (sample std / sqrt(n)) of per-episode values.
inline MeanStderr mean_stderr(const Vec& v) {
  if (v.empty()) throw ConfigError("mean_stderr of an empty sample");
  const double n = static_cast<double>(v.size());
  double m = 0.0;
  for (double x : v) m += x;
  m /= n;
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / (n - 1.0) / n)};
}

struct EvalRow {
  std::size_t k = 0;
  std::optional<double> model_mse;
  std::optional<double> model_stderr;
  std::array<double, 4> baseline_mse{};  // order of kAllBaselines

  double baseline(BaselineKind b) const { return baseline_mse[static_cast<std::size_t>(b)]; }
  bool operator==(const EvalRow&) const = default;
};

struct EvalReport {
  std::string family;
  std::string arch;  // "none" for baseline-only reports
  std::vector<std::uint64_t> seeds;
  std::string fingerprint;
  std::string checkpoint_fingerprint;  // config fingerprint of the evaluated checkpoint, if any
  std::string ood_kind = std::string(kInDistribution);
  std::size_t n_episodes = 0;
  std::vector<EvalRow> rows;

  bool has_model() const { return !rows.empty() && rows.front().model_mse.has_value(); }
  bool operator==(const EvalReport&) const = default;
};

/// Everything that determines an evaluation; its fingerprint identifies a report.
struct EvalConfig {
  TaskConfig task;
  std::optional<ModelConfig> model;
  std::vector<std::size_t> k_values;
  std::size_t n_episodes = 500;
  std::uint64_t base_seed = 0;
  std::optional<OODKind> ood;
  OODOptions ood_options;

  std::string to_text() const {
    KeyValues kvs = task.to_key_values();
    if (model) kvs.merge(model->to_key_values());
    std::string ks;
    for (std::size_t i = 0; i < k_values.size(); ++i) ks += (i ? "," : "") + std::to_string(k_values[i]);
    kvs["eval.k_values"] = ks;
    kvs["eval.n_episodes"] = std::to_string(n_episodes);
    kvs["eval.base_seed"] = std::to_string(base_seed);
    kvs["eval.ood_kind"] = ood ? std::string(to_string(*ood)) : std::string(kInDistribution);
    kvs["eval.ood_scale_factor"] = kv::from_double(ood_options.scale_factor);
    kvs["eval.ood_extra_noise"] = kv::from_double(ood_options.extra_noise_sigma);
    kvs["eval.ood_skew_ratio"] = kv::from_double(ood_options.skew_ratio);
    return format_key_values(kvs);
  }

  std::string fingerprint() const { return hex64(fnv1a64(to_text())); }
};

namespace eval_detail {

inline EvalReport run(const EvalConfig& ec, const ModelParams* params) {
  if (ec.k_values.empty()) throw ConfigError("k_values must be non-empty");
  if (ec.n_episodes == 0) throw ConfigError("n_episodes must be >= 1");
  ec.task.validate();
  if (ec.model) {
    for (std::size_t k : ec.k_values) {
      if (2 * k + 1 > ec.model->max_seq_len) {
        throw ConfigError("k=" + std::to_string(k) + " exceeds the model context (max_seq_len " +
                          std::to_string(ec.model->max_seq_len) + ")");
      }
    }
  }
  EvalReport r;
  r.family = std::string(to_string(ec.task.family));
  r.arch = ec.model ? std::string(to_string(ec.model->arch)) : "none";
  r.seeds = {ec.base_seed};
  r.fingerprint = ec.fingerprint();
  r.ood_kind = ec.ood ? std::string(to_string(*ec.ood)) : std::string(kInDistribution);
  r.n_episodes = ec.n_episodes;
  for (std::size_t k : ec.k_values) {
    if (k == 0) throw ConfigError("k values must be >= 1");
    const std::vector<Prompt> prompts = eval_prompts(ec.task, k, ec.n_episodes, ec.base_seed, ec.ood, ec.ood_options);
    EvalRow row;
    row.k = k;
    if (params) {
      Vec se;
      for (std::size_t i = 0; i < prompts.size(); i += 128) {
        const std::vector<Prompt> part(prompts.begin() + static_cast<std::ptrdiff_t>(i),
                                       prompts.begin() + static_cast<std::ptrdiff_t>(std::min(prompts.size(), i + 128)));
        const Vec preds = predict_queries(*ec.model, *params, part);
        for (std::size_t j = 0; j < part.size(); ++j) se.push_back((preds[j] - part[j].query_target) * (preds[j] - part[j].query_target));
      }
      const MeanStderr ms = mean_stderr(se);
      row.model_mse = ms.mean;
      row.model_stderr = ms.stderr_;
    }
    for (std::size_t b = 0; b < kAllBaselines.size(); ++b) {
      double s = 0.0;
      for (const auto& p : prompts) {
        const double e = run_baseline(kAllBaselines[b], p) - p.query_target;
        s += e * e;
      }
      row.baseline_mse[b] = s / static_cast<double>(prompts.size());
    }
    r.rows.push_back(row);
  }
  return r;
}

}  // namespace eval_detail

/// Model and baselines on identical prompts for every k. Parameters are read only.
inline EvalReport eval_mse_vs_context(const ModelConfig& model, const ModelParams& params, const TaskConfig& task,
                                      const std::vector<std::size_t>& k_values, std::size_t n_episodes,
                                      std::uint64_t base_seed, std::optional<OODKind> ood = std::nullopt,
                                      const OODOptions& opts = {}) {
  model.validate();
  EvalConfig ec{task, model, k_values, n_episodes, base_seed, ood, opts};
  return eval_detail::run(ec, &params);
}

/// Baseline-only report (model columns absent).
inline EvalReport eval_baselines(const TaskConfig& task, const std::vector<std::size_t>& k_values, std::size_t n_episodes,
                                 std::uint64_t base_seed, std::optional<OODKind> ood = std::nullopt,
                                 const OODOptions& opts = {}) {
  EvalConfig ec{task, std::nullopt, k_values, n_episodes, base_seed, ood, opts};
  return eval_detail::run(ec, nullptr);
}

// ---------------------------------------------------------------------------
// Paired input-scaling comparison

/// Two-sided exact sign test: P(|Bin(n, 1/2) - n/2| >= |n_pos - n/2|).
inline double sign_test_p_value(std::size_t n_pos, std::size_t n_neg) {
  const std::size_t n = n_pos + n_neg;
  if (n == 0) return 1.0;
  const std::size_t m = std::min(n_pos, n_neg);
  const double ln2n = static_cast<double>(n) * std::log(2.0);
  double tail = 0.0;
  for (std::size_t i = 0; i <= m; ++i) {
    tail += std::exp(std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(i) + 1.0) -
                     std::lgamma(static_cast<double>(n - i) + 1.0) - ln2n);
  }
  return std::min(1.0, 2.0 * tail);
}

/// Sign test on paired differences; exact zeros are dropped.
inline double sign_test_p_value(const Vec& diffs) {
  std::size_t pos = 0, neg = 0;
  for (double d : diffs) {
    if (d > 0.0) ++pos;
    else if (d < 0.0) ++neg;
  }
  return sign_test_p_value(pos, neg);
}

struct PairedRow {
  std::size_t k = 0;
  double std_mse = 0.0;
  double scaled_mse = 0.0;
  double diff_mean = 0.0;  // std_mse - scaled_mse; positive favours the scaled-input model
  double diff_stderr = 0.0;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  double p_value = 1.0;
  std::uint64_t prompts_std = 0;     // checksum of the prompts the standard model saw
  std::uint64_t prompts_scaled = 0;  // checksum of the prompts the scaled model saw
  bool operator==(const PairedRow&) const = default;
};

struct PairedReport {
  std::string family;
  std::string arch;
  std::vector<std::uint64_t> seeds;
  std::string fingerprint;
  std::size_t n_episodes = 0;
  std::vector<PairedRow> rows;
  bool operator==(const PairedReport&) const = default;
};

/// FNV-1a over the bit patterns of every input and label of the prompts.
inline std::uint64_t prompts_checksum(const std::vector<Prompt>& prompts) {
  std::string bytes;
  auto put = [&](double v) { bytes.append(reinterpret_cast<const char*>(&v), sizeof v); };
  for (const auto& p : prompts) {
    for (const auto& x : p.xs)
      for (double v : x) put(v);
    for (double y : p.ys) put(y);
    put(p.query_target);
  }
  return fnv1a64(bytes);
}

/// Evaluates both models on the same prompts (one prompt set per k, shared)
/// and tests the per-episode squared-error differences.
inline PairedReport compare_input_scaling(const ModelConfig& mc_std, const ModelParams& params_std,
                                          const ModelConfig& mc_scaled, const ModelParams& params_scaled,
                                          const TaskConfig& task, const std::vector<std::size_t>& k_values,
                                          std::size_t n_episodes, std::uint64_t seed) {
  if (!(mc_std == mc_scaled)) throw ConfigError("compare_input_scaling needs two models of identical architecture");
  if (k_values.empty() || n_episodes == 0) throw ConfigError("compare_input_scaling needs k values and episodes");
  EvalConfig ec{task, mc_std, k_values, n_episodes, seed, std::nullopt, {}};
  PairedReport r;
  r.family = std::string(to_string(task.family));
  r.arch = std::string(to_string(mc_std.arch));
  r.seeds = {seed};
  r.fingerprint = hex64(fnv1a64(ec.to_text() + "paired=input_scaling\n"));
  r.n_episodes = n_episodes;
  for (std::size_t k : k_values) {
    if (2 * k + 1 > mc_std.max_seq_len) throw ConfigError("k=" + std::to_string(k) + " exceeds the model context");
    const std::vector<Prompt> prompts = eval_prompts(task, k, n_episodes, seed);
    const std::vector<Prompt>& seen_std = prompts;
    const std::vector<Prompt>& seen_scaled = prompts;
    const Vec a = predict_queries(mc_std, params_std, seen_std);
    const Vec b = predict_queries(mc_scaled, params_scaled, seen_scaled);
    Vec se_a, se_b, diffs;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      se_a.push_back((a[i] - prompts[i].query_target) * (a[i] - prompts[i].query_target));
      se_b.push_back((b[i] - prompts[i].query_target) * (b[i] - prompts[i].query_target));
      diffs.push_back(se_a.back() - se_b.back());
    }
    PairedRow row;
    row.k = k;
    row.std_mse = mean_stderr(se_a).mean;
    row.scaled_mse = mean_stderr(se_b).mean;
    const MeanStderr dm = mean_stderr(diffs);
    row.diff_mean = dm.mean;
    row.diff_stderr = dm.stderr_;
    for (double d : diffs) {
      if (d > 0.0) ++row.n_pos;
      else if (d < 0.0) ++row.n_neg;
    }
    row.p_value = sign_test_p_value(row.n_pos, row.n_neg);
    row.prompts_std = prompts_checksum(seen_std);
    row.prompts_scaled = prompts_checksum(seen_scaled);
    r.rows.push_back(row);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Emission

enum class ReportFormat { csv, json };

inline ReportFormat report_format_from_string(std::string_view s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  throw ConfigError("unknown report format '" + std::string(s) + "'");
}

inline std::string report_csv(const EvalReport& r) {
  const bool m = r.has_model();
  std::string out = m ? "k,model_mse,model_stderr,zero_mse,lsq_mse,knn3_mse,avg_mse\n" : "k,zero_mse,lsq_mse,knn3_mse,avg_mse\n";
  for (const auto& row : r.rows) {
    out += std::to_string(row.k);
    if (m) out += "," + kv::from_double(*row.model_mse) + "," + kv::from_double(*row.model_stderr);
    for (double v : row.baseline_mse) out += "," + kv::from_double(v);
    out += "\n";
  }
  return out;
}

inline nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json j{{"k", row.k},
                     {"zero_mse", row.baseline(BaselineKind::zero)},
                     {"lsq_mse", row.baseline(BaselineKind::least_squares)},
                     {"knn3_mse", row.baseline(BaselineKind::knn3)},
                     {"avg_mse", row.baseline(BaselineKind::averaging)}};
    if (row.model_mse) {
      j["model_mse"] = *row.model_mse;
      j["model_stderr"] = *row.model_stderr;
    }
    rows.push_back(std::move(j));
  }
  return {{"metadata",
           {{"family", r.family},
            {"arch", r.arch},
            {"seeds", r.seeds},
            {"fingerprint", r.fingerprint},
            {"checkpoint_fingerprint", r.checkpoint_fingerprint},
            {"ood_kind", r.ood_kind},
            {"n_episodes", r.n_episodes}}},
          {"rows", rows}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  try {
    EvalReport r;
    const auto& m = j.at("metadata");
    r.family = m.at("family").get<std::string>();
    r.arch = m.at("arch").get<std::string>();
    r.seeds = m.at("seeds").get<std::vector<std::uint64_t>>();
    r.fingerprint = m.at("fingerprint").get<std::string>();
    r.checkpoint_fingerprint = m.value("checkpoint_fingerprint", std::string());
    r.ood_kind = m.at("ood_kind").get<std::string>();
    r.n_episodes = m.at("n_episodes").get<std::size_t>();
    for (const auto& jr : j.at("rows")) {
      EvalRow row;
      row.k = jr.at("k").get<std::size_t>();
      if (jr.contains("model_mse")) {
        row.model_mse = jr.at("model_mse").get<double>();
        row.model_stderr = jr.at("model_stderr").get<double>();
      }
      row.baseline_mse = {jr.at("zero_mse").get<double>(), jr.at("lsq_mse").get<double>(),
                          jr.at("knn3_mse").get<double>(), jr.at("avg_mse").get<double>()};
      r.rows.push_back(row);
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed report JSON: ") + e.what());
  }
}

/// Parses the CSV form back into rows (metadata is JSON-only).
inline std::vector<EvalRow> rows_from_csv(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("empty report CSV");
  const bool m = line == "k,model_mse,model_stderr,zero_mse,lsq_mse,knn3_mse,avg_mse";
  if (!m && line != "k,zero_mse,lsq_mse,knn3_mse,avg_mse") throw ConfigError("unexpected report CSV header '" + line + "'");
  std::vector<EvalRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    if (cells.size() != (m ? 7u : 5u)) throw ConfigError("report CSV row has " + std::to_string(cells.size()) + " cells");
    EvalRow row;
    row.k = kv::to_u64("k", cells[0]);
    std::size_t c = 1;
    if (m) {
      row.model_mse = kv::to_double("model_mse", cells[1]);
      row.model_stderr = kv::to_double("model_stderr", cells[2]);
      c = 3;
    }
    for (std::size_t b = 0; b < 4; ++b) row.baseline_mse[b] = kv::to_double("baseline", cells[c + b]);
    rows.push_back(row);
  }
  return rows;
}

inline std::string paired_report_csv(const PairedReport& r) {
  std::string out = "k,std_mse,scaled_mse,diff_mean,diff_stderr,n_pos,n_neg,p_value,prompts_std,prompts_scaled\n";
  for (const auto& row : r.rows) {
    out += std::to_string(row.k) + "," + kv::from_double(row.std_mse) + "," + kv::from_double(row.scaled_mse) + "," +
           kv::from_double(row.diff_mean) + "," + kv::from_double(row.diff_stderr) + "," + std::to_string(row.n_pos) +
           "," + std::to_string(row.n_neg) + "," + kv::from_double(row.p_value) + "," + hex64(row.prompts_std) + "," +
           hex64(row.prompts_scaled) + "\n";
  }
  return out;
}

inline nlohmann::json paired_report_json(const PairedReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"k", row.k},
                    {"std_mse", row.std_mse},
                    {"scaled_mse", row.scaled_mse},
                    {"diff_mean", row.diff_mean},
                    {"diff_stderr", row.diff_stderr},
                    {"n_pos", row.n_pos},
                    {"n_neg", row.n_neg},
                    {"p_value", row.p_value},
                    {"prompts_std", hex64(row.prompts_std)},
                    {"prompts_scaled", hex64(row.prompts_scaled)}});
  }
  return {{"metadata",
           {{"family", r.family},
            {"arch", r.arch},
            {"seeds", r.seeds},
            {"fingerprint", r.fingerprint},
            {"ood_kind", "paired_input_scaling"},
            {"n_episodes", r.n_episodes}}},
          {"rows", rows}};
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os << text;
  os.close();
  if (!os) throw IoError("write failed for '" + path + "'");
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void emit_report(const EvalReport& r, const std::string& path, ReportFormat fmt) {
  write_text_file(path, fmt == ReportFormat::csv ? report_csv(r) : report_json(r).dump(2) + "\n");
}

inline void emit_report(const PairedReport& r, const std::string& path, ReportFormat fmt) {
  write_text_file(path, fmt == ReportFormat::csv ? paired_report_csv(r) : paired_report_json(r).dump(2) + "\n");
}

inline EvalReport read_report_json(const std::string& path) {
  const std::string text = read_text_file(path);
  try {
    return report_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

}  // namespace icl
