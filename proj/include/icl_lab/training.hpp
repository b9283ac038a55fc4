// SPDX-License-Identifier: Apache-2.0
//
// Loss, learning-rate schedule, curriculum and the training loop.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "icl_lab/adamw.hpp"
#include "icl_lab/config.hpp"
#include "icl_lab/episodes.hpp"
#include "icl_lab/model.hpp"

namespace icl {

inline double mse_loss(const Vec& preds, const Vec& targets) {
  if (preds.size() != targets.size()) throw ShapeError("mse_loss: prediction/target length mismatch");
  if (preds.empty()) throw ConfigError("mse_loss on an empty batch");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += (preds[i] - targets[i]) * (preds[i] - targets[i]);
  return s / static_cast<double>(preds.size());
}

/// Differentiable mean squared error over all entries.
inline ad::Var mse_loss(ad::Var preds, ad::Var targets) {
  if (preds.shape() != targets.shape()) throw ShapeError("mse_loss: prediction/target shape mismatch");
  return ad::reduce_mean(ad::square(ad::sub(preds, targets)));
}

/// Linear warm-up 0 -> base_lr over warmup_steps, then half-cosine decay to 0 at total_steps.
inline double cosine_lr(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr) {
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return base_lr;
  const double progress =
      std::clamp(static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps), 0.0, 1.0);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct CurriculumSchedule {
  std::size_t start_dim = 5;
  std::size_t dim_cap = 20;
  std::size_t dim_increment = 1;
  std::size_t start_len = 11;
  std::size_t len_increment = 2;
  std::size_t len_cap = 41;
  std::size_t step_interval = 2000;

  static CurriculumSchedule kernel() { return {5, 20, 1, 11, 2, 41, 2000}; }
  static CurriculumSchedule dynamics() { return {5, 20, 1, 26, 5, 101, 2000}; }

  bool operator==(const CurriculumSchedule&) const = default;
};

struct CurriculumState {
  std::size_t dim;
  std::size_t prompt_len;
  bool operator==(const CurriculumState&) const = default;
};

inline CurriculumState curriculum_state(const CurriculumSchedule& s, std::size_t step) {
  const std::size_t stage = step / s.step_interval;
  return {std::min(s.start_dim + s.dim_increment * stage, s.dim_cap),
          std::min(s.start_len + s.len_increment * stage, s.len_cap)};
}

/// (step, dim, len) at every stage boundary until both axes are capped.
inline std::vector<std::pair<std::size_t, CurriculumState>> curriculum_table(const CurriculumSchedule& s) {
  std::vector<std::pair<std::size_t, CurriculumState>> rows;
  for (std::size_t step = 0;; step += s.step_interval) {
    const auto st = curriculum_state(s, step);
    rows.emplace_back(step, st);
    if (st.dim == s.dim_cap && st.prompt_len == s.len_cap) break;
  }
  return rows;
}

enum class CurriculumMode { off, kernel, dynamics };

inline std::string_view to_string(CurriculumMode m) {
  switch (m) {
    case CurriculumMode::off: return "off";
    case CurriculumMode::kernel: return "kernel";
    case CurriculumMode::dynamics: return "dynamics";
  }
  return "?";
}

inline CurriculumMode curriculum_mode_from_string(std::string_view s) {
  if (s == "off") return CurriculumMode::off;
  if (s == "kernel") return CurriculumMode::kernel;
  if (s == "dynamics") return CurriculumMode::dynamics;
  throw ConfigError("unknown curriculum '" + std::string(s) + "'");
}

enum class LossMode { query_only, all_prefix };

inline std::string_view to_string(LossMode m) { return m == LossMode::query_only ? "query_only" : "all_prefix"; }

inline LossMode loss_mode_from_string(std::string_view s) {
  if (s == "query_only") return LossMode::query_only;
  if (s == "all_prefix") return LossMode::all_prefix;
  throw ConfigError("unknown loss_mode '" + std::string(s) + "'");
}

enum class DataMode { on_the_fly, fixed_pool };

inline std::string_view to_string(DataMode m) { return m == DataMode::on_the_fly ? "on_the_fly" : "fixed_pool"; }

inline DataMode data_mode_from_string(std::string_view s) {
  if (s == "on_the_fly") return DataMode::on_the_fly;
  if (s == "fixed_pool") return DataMode::fixed_pool;
  throw ConfigError("unknown data_mode '" + std::string(s) + "'");
}

/// Smaller step for the deeper ssm preset.
inline double default_lr(Arch arch) { return arch == Arch::ssm ? 5e-5 : 1e-4; }

struct TrainConfig {
  TaskConfig task;
  ModelConfig model = model_detail::raw_preset(Arch::transformer);
  std::size_t batch_size = 64;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.0;
  std::size_t total_steps = 5000;
  std::size_t warmup_steps = 300;
  CurriculumMode curriculum = CurriculumMode::off;
  bool early_stopping = false;
  std::size_t patience = 5;
  std::size_t eval_every = 500;
  std::size_t val_episodes = 500;
  std::uint64_t base_seed = 0;
  LossMode loss_mode = LossMode::query_only;
  double grad_clip = 1.0;
  DataMode data_mode = DataMode::on_the_fly;
  std::size_t pool_size = 10000;

  bool operator==(const TrainConfig&) const = default;

  KeyValues to_key_values() const {
    KeyValues kvs = task.to_key_values();
    kvs.merge(model.to_key_values());
    kvs.insert({{"batch_size", std::to_string(batch_size)},
                {"lr", kv::from_double(lr)},
                {"beta1", kv::from_double(beta1)},
                {"beta2", kv::from_double(beta2)},
                {"weight_decay", kv::from_double(weight_decay)},
                {"total_steps", std::to_string(total_steps)},
                {"warmup_steps", std::to_string(warmup_steps)},
                {"curriculum", std::string(to_string(curriculum))},
                {"early_stopping", kv::from_bool(early_stopping)},
                {"patience", std::to_string(patience)},
                {"eval_every", std::to_string(eval_every)},
                {"val_episodes", std::to_string(val_episodes)},
                {"base_seed", std::to_string(base_seed)},
                {"loss_mode", std::string(to_string(loss_mode))},
                {"grad_clip", kv::from_double(grad_clip)},
                {"data_mode", std::string(to_string(data_mode))},
                {"pool_size", std::to_string(pool_size)}});
    return kvs;
  }

  std::string to_text() const { return format_key_values(to_key_values()); }

  /// Stable hash of the canonical key = value text.
  std::uint64_t fingerprint() const { return fnv1a64(to_text()); }

  bool set(const std::string& key, const std::string& v) {
    if (task.set(key, v) || model.set(key, v)) return true;
    if (key == "batch_size") batch_size = kv::to_u64(key, v);
    else if (key == "lr") lr = kv::to_double(key, v);
    else if (key == "beta1") beta1 = kv::to_double(key, v);
    else if (key == "beta2") beta2 = kv::to_double(key, v);
    else if (key == "weight_decay") weight_decay = kv::to_double(key, v);
    else if (key == "total_steps") total_steps = kv::to_u64(key, v);
    else if (key == "warmup_steps") warmup_steps = kv::to_u64(key, v);
    else if (key == "curriculum") curriculum = curriculum_mode_from_string(v);
    else if (key == "early_stopping") early_stopping = kv::to_bool(key, v);
    else if (key == "patience") patience = kv::to_u64(key, v);
    else if (key == "eval_every") eval_every = kv::to_u64(key, v);
    else if (key == "val_episodes") val_episodes = kv::to_u64(key, v);
    else if (key == "base_seed" || key == "seed") base_seed = kv::to_u64(key, v);
    else if (key == "loss_mode") loss_mode = loss_mode_from_string(v);
    else if (key == "grad_clip") grad_clip = kv::to_double(key, v);
    else if (key == "data_mode") data_mode = data_mode_from_string(v);
    else if (key == "pool_size") pool_size = kv::to_u64(key, v);
    else return false;
    return true;
  }

  /// Applies key = value pairs. An "arch" key first resets the model (and the
  /// learning rate) to that architecture's preset so later keys refine it.
  void apply(const KeyValues& kvs) {
    if (auto it = kvs.find("arch"); it != kvs.end()) {
      const ModelConfig preset = model_detail::raw_preset(arch_from_string(it->second));
      if (preset.arch != model.arch) {
        model = preset;
        lr = default_lr(preset.arch);
      }
    }
    for (const auto& [k, v] : kvs)
      if (!set(k, v)) throw ConfigError("unknown config key '" + k + "'");
  }

  static TrainConfig from_key_values(const KeyValues& kvs) {
    TrainConfig c;
    c.apply(kvs);
    c.validate();
    return c;
  }

  void validate() const {
    task.validate();
    model.validate();
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (total_steps == 0) throw ConfigError("total_steps must be >= 1");
    if (warmup_steps >= total_steps) throw ConfigError("warmup_steps must be < total_steps");
    if (early_stopping && (patience == 0 || eval_every == 0)) throw ConfigError("early stopping needs patience and eval_every >= 1");
    if (data_mode == DataMode::fixed_pool && pool_size == 0) throw ConfigError("pool_size must be >= 1");
    const std::size_t kmax = curriculum == CurriculumMode::off ? task.k : curriculum_schedule().len_cap;
    const std::size_t dmax = curriculum == CurriculumMode::off ? task.d : curriculum_schedule().dim_cap;
    if (2 * std::max(kmax, task.k) + 1 > model.max_seq_len) {
      throw ConfigError("max_seq_len " + std::to_string(model.max_seq_len) + " cannot hold " +
                        std::to_string(std::max(kmax, task.k)) + "-shot prompts");
    }
    if (task.episode_dim(std::max(dmax, task.d)) > model.max_input_dim) {
      throw ConfigError("input dimension exceeds max_input_dim " + std::to_string(model.max_input_dim));
    }
  }

  CurriculumSchedule curriculum_schedule() const {
    return curriculum == CurriculumMode::dynamics ? CurriculumSchedule::dynamics() : CurriculumSchedule::kernel();
  }

  CurriculumState stage_at(std::size_t step) const {
    if (curriculum == CurriculumMode::off) return {task.d, task.k};
    return curriculum_state(curriculum_schedule(), step);
  }
};

struct TrainingLogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::size_t dim = 0;
  std::size_t prompt_len = 0;
  std::optional<double> val_mse;
  bool clipped = false;
  bool operator==(const TrainingLogRow&) const = default;
};

struct TrainingLog {
  std::vector<TrainingLogRow> rows;
  std::size_t clip_events = 0;
  double wall_seconds = 0.0;
  std::optional<double> best_val_mse;
  std::size_t best_step = 0;
  bool stopped_early = false;
  std::string checkpoint_path;

  /// CSV: step, loss, lr, dim, prompt_len, val_mse (empty when not evaluated).
  std::string to_csv() const {
    std::string out = "step,loss,lr,dim,prompt_len,val_mse\n";
    for (const auto& r : rows) {
      out += std::to_string(r.step) + "," + kv::from_double(r.loss) + "," + kv::from_double(r.lr) + "," +
             std::to_string(r.dim) + "," + std::to_string(r.prompt_len) + "," +
             (r.val_mse ? kv::from_double(*r.val_mse) : std::string()) + "\n";
    }
    return out;
  }

  void write_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << to_csv();
    if (!os) throw IoError("write failed for '" + path + "'");
  }
};

/// Thrown when the loss turns non-finite; carries the log up to that point.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& what, TrainingLog log) : Error(what), log_(std::move(log)) {}
  const TrainingLog& log() const noexcept { return log_; }

 private:
  TrainingLog log_;
};

struct TrainResult {
  ModelParams params;
  TrainingLog log;
};

namespace train_detail {

inline constexpr std::uint64_t kValidationSalt = 0x56414C4944ULL;  // "VALID"
inline constexpr std::uint64_t kTestSalt = 0x54455354ULL;          // "TEST"
inline constexpr std::uint64_t kPoolSalt = 0x504F4F4CULL;          // "POOL"

inline EpisodeSeed training_seed(const TrainConfig& c, std::size_t step, std::size_t b) {
  if (c.data_mode == DataMode::fixed_pool) {
    // the function instance comes from a fixed pool slot; inputs stay fresh
    // because the slot's stream is advanced by an episode-specific offset below
    const std::uint64_t slot = mix_seed(c.base_seed, step, b) % c.pool_size;
    return {mix_seed(c.base_seed, kPoolSalt), slot};
  }
  return {mix_seed(c.base_seed, step), b};
}

}  // namespace train_detail

/// Seeds of the held-out validation episodes.
inline std::uint64_t validation_base_seed(std::uint64_t base_seed) { return mix_seed(base_seed, train_detail::kValidationSalt); }
inline std::uint64_t test_base_seed(std::uint64_t base_seed) { return mix_seed(base_seed, train_detail::kTestSalt); }

/// Mean squared query error of the model on `prompts`, evaluated in chunks.
inline double model_mse(const ModelConfig& mc, const ModelParams& params, const std::vector<Prompt>& prompts,
                        std::size_t chunk = 128) {
  double s = 0.0;
  for (std::size_t i = 0; i < prompts.size(); i += chunk) {
    const std::vector<Prompt> part(prompts.begin() + static_cast<std::ptrdiff_t>(i),
                                   prompts.begin() + static_cast<std::ptrdiff_t>(std::min(prompts.size(), i + chunk)));
    const Vec preds = predict_queries(mc, params, part);
    for (std::size_t j = 0; j < part.size(); ++j) s += (preds[j] - part[j].query_target) * (preds[j] - part[j].query_target);
  }
  return s / static_cast<double>(prompts.size());
}

/// Builds one training batch at curriculum stage `st`.
inline std::vector<Prompt> training_batch(const TrainConfig& c, std::size_t step, const CurriculumState& st) {
  std::vector<Prompt> batch;
  batch.reserve(c.batch_size);
  for (std::size_t b = 0; b < c.batch_size; ++b) {
    EpisodeSeed seed = train_detail::training_seed(c, step, b);
    if (c.data_mode == DataMode::fixed_pool) {
      // same instance as the pool slot, fresh inputs: draw the instance from the
      // slot stream, then the prompt from an episode stream
      Rng inst_rng = seed.rng();
      const std::size_t d = c.task.episode_dim(st.dim);
      Rng prompt_rng(mix_seed(c.base_seed, step, b));
      Prompt p;
      for (int attempt = 0;; ++attempt) {
        FunctionInstance f = sample_instance(c.task, d, inst_rng);
        try {
          p = generate_prompt(f, st.prompt_len, c.task.input(), prompt_rng);
          break;
        } catch (const DivergenceError&) {
          if (attempt + 1 >= kMaxDivergenceRedraws) throw;
        }
      }
      p.meta.seed = seed.stream_seed();
      batch.push_back(std::move(p));
    } else {
      batch.push_back(sample_episode(c.task, st.dim, st.prompt_len, seed));
    }
  }
  if (c.task.normalizes()) {
    normalize_outputs_batch(batch, c.task.normalize == NormalizeLabels::pooled ? NormalizationMode::pooled
                                                                               : NormalizationMode::per_prompt);
  }
  return batch;
}

/// Full training run. Deterministic given the config.
inline TrainResult train(const TrainConfig& c) {
  c.validate();
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res;
  res.params = init_params(c.model, c.base_seed);
  std::map<std::string, AdamWState> opt;
  for (const auto& [name, t] : res.params) opt.emplace(name, AdamWState::fresh(t.shape()));
  AdamWHyper hp{c.lr, c.beta1, c.beta2, 1e-8, c.weight_decay};

  std::vector<Prompt> validation;
  const bool validate_periodically = c.eval_every > 0 && c.val_episodes > 0;
  if (validate_periodically) {
    validation = sample_episodes(c.task, c.task.d, c.task.k, validation_base_seed(c.base_seed), 0, c.val_episodes);
  }
  ModelParams best;
  std::size_t evals_since_best = 0;

  for (std::size_t step = 0; step < c.total_steps; ++step) {
    const CurriculumState st = c.stage_at(step);
    const std::vector<Prompt> batch = training_batch(c, step, st);
    const PromptBatch pb = make_prompt_batch(batch, c.model);

    ad::Tape tape;
    ParamVars pv = bind_params(tape, res.params, true);
    ad::Var loss;
    TrainingLogRow row{step, std::numeric_limits<double>::quiet_NaN(), 0.0, st.dim, st.prompt_len, std::nullopt, false};
    try {
      if (c.loss_mode == LossMode::query_only) {
        ad::Var preds = forward_predictions(tape, c.model, pv, pb, ReadPositions::query_only);
        loss = mse_loss(preds, tape.constant(Tensor(Shape{pb.batch, 1}, pb.query_targets)));
      } else {
        ad::Var preds = forward_predictions(tape, c.model, pv, pb, ReadPositions::every_x);
        loss = mse_loss(preds, tape.constant(pb.all_targets));
      }
    } catch (const NonFiniteError& e) {
      res.log.rows.push_back(row);
      throw TrainingAborted("non-finite training loss at step " + std::to_string(step) + ": " + e.what(), res.log);
    }
    const double loss_value = loss.value().item();
    row.loss = loss_value;
    if (!std::isfinite(loss_value)) {
      res.log.rows.push_back(row);
      throw TrainingAborted("non-finite training loss at step " + std::to_string(step), res.log);
    }
    try {
      tape.backward(loss);
    } catch (const NonFiniteError& e) {
      res.log.rows.push_back(row);
      throw TrainingAborted("non-finite gradient at step " + std::to_string(step) + ": " + e.what(), res.log);
    }

    std::map<std::string, Tensor> grads;
    double sq = 0.0;
    for (const auto& [name, var] : pv) {
      Tensor g = *tape.grad(var);
      for (double v : g.data()) sq += v * v;
      grads.emplace(name, std::move(g));
    }
    const double gnorm = std::sqrt(sq);
    if (!std::isfinite(gnorm)) {
      res.log.rows.push_back(row);
      throw TrainingAborted("non-finite gradient at step " + std::to_string(step), res.log);
    }
    if (c.grad_clip > 0.0 && gnorm > c.grad_clip) {
      const double s = c.grad_clip / gnorm;
      for (auto& [_, g] : grads)
        for (auto& v : g.data()) v *= s;
      row.clipped = true;
      ++res.log.clip_events;
    }
    hp.lr = cosine_lr(step, c.total_steps, c.warmup_steps, c.lr);
    row.lr = hp.lr;
    if (hp.lr > 0.0) {
      for (auto& [name, p] : res.params) adamw_step(p, grads.at(name), opt.at(name), hp, name);
    }

    const bool last = step + 1 == c.total_steps;
    if (validate_periodically && ((step + 1) % c.eval_every == 0 || last)) {
      const double v = model_mse(c.model, res.params, validation);
      row.val_mse = v;
      if (!res.log.best_val_mse || v < *res.log.best_val_mse) {
        res.log.best_val_mse = v;
        res.log.best_step = step;
        evals_since_best = 0;
        if (c.early_stopping) best = res.params;
      } else {
        ++evals_since_best;
      }
      res.log.rows.push_back(row);
      if (c.early_stopping && evals_since_best >= c.patience) {
        res.log.stopped_early = true;
        break;
      }
    } else {
      res.log.rows.push_back(row);
    }
  }
  if (c.early_stopping && !best.empty()) res.params = std::move(best);
  res.log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace icl
