// SPDX-License-Identifier: Apache-2.0
//
// icl_lab: train, evaluate, run baselines, dump episodes, print curricula.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "icl_lab.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string preset;
  std::size_t threads = 1;
  std::vector<std::string> sets;
  std::string family;
  std::string arch;
  std::optional<std::size_t> d;
  std::string k;
};

struct EvalArgs {
  std::string checkpoint;
  std::size_t episodes = 500;
  std::string ood;
  std::string format = "both";
  std::size_t count = 16;
};

/// Files written by the current command; deleted if the command fails.
class OutputGuard {
 public:
  void track(const fs::path& p) { files_.push_back(p); }
  void commit() { files_.clear(); }
  ~OutputGuard() {
    std::error_code ec;
    for (const auto& f : files_) fs::remove(f, ec);
  }

 private:
  std::vector<fs::path> files_;
};

icl::KeyValues preset_key_values(const std::string& name) {
  using icl::KeyValues;
  if (name.empty() || name == "linear") return {{"family", "linear"}, {"d", "5"}, {"k", "11"}, {"noise_sigma", "0.1"}};
  if (name == "kernel") {
    return {{"family", "gaussian_kernel"}, {"d", "20"},        {"k", "41"},         {"num_centers", "20"},
            {"bandwidth", "1.5"},          {"noise_sigma", "0.1"}, {"input_dist", "uniform_cube"},
            {"normalize", "pooled"},       {"curriculum", "kernel"}};
  }
  const std::string prefix = "dynamics";
  if (name.rfind(prefix, 0) == 0) {
    std::string kind = "poly";
    if (name.size() > prefix.size()) {
      if (name[prefix.size()] != '-') throw icl::ConfigError("unknown preset '" + name + "'");
      kind = name.substr(prefix.size() + 1);
    }
    (void)icl::dynamics_kind_from_string(kind);
    return {{"family", "dynamics"}, {"dynamics_kind", kind},  {"d", "20"},
            {"k", "101"},           {"noise_sigma", "0.1"},   {"normalize", "off"},
            {"curriculum", "dynamics"}};
  }
  throw icl::ConfigError("unknown preset '" + name + "' (linear, kernel, dynamics[-kind])");
}

/// Parses "7", "1,5,9" or "1..41" (optionally "1..41:5").
std::vector<std::size_t> parse_k_list(const std::string& s) {
  std::vector<std::size_t> out;
  if (const auto dots = s.find(".."); dots != std::string::npos) {
    const std::size_t lo = icl::kv::to_u64("k", s.substr(0, dots));
    std::string rest = s.substr(dots + 2);
    std::size_t step = 1;
    if (const auto colon = rest.find(':'); colon != std::string::npos) {
      step = icl::kv::to_u64("k step", rest.substr(colon + 1));
      rest = rest.substr(0, colon);
    }
    const std::size_t hi = icl::kv::to_u64("k", rest);
    if (lo == 0 || hi < lo || step == 0) throw icl::ConfigError("bad k range '" + s + "'");
    for (std::size_t k = lo; k <= hi; k += step) out.push_back(k);
    return out;
  }
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, ',');) out.push_back(icl::kv::to_u64("k", std::string(icl::trim(part))));
  if (out.empty()) throw icl::ConfigError("empty k list");
  return out;
}

/// Effective key = value set: preset < config file < shorthands/--set/--seed.
icl::KeyValues merged_key_values(const CommonArgs& a, bool k_is_list) {
  icl::KeyValues kvs = preset_key_values(a.preset);
  if (!a.config_path.empty()) {
    for (auto& [k, v] : icl::read_key_values_file(a.config_path)) kvs[k] = v;
  }
  if (!a.family.empty()) kvs["family"] = a.family;
  if (!a.arch.empty()) kvs["arch"] = a.arch;
  if (a.d) kvs["d"] = std::to_string(*a.d);
  if (!a.k.empty() && !k_is_list) kvs["k"] = a.k;
  for (const auto& s : a.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw icl::ConfigError("--set expects key=value, got '" + s + "'");
    kvs[std::string(icl::trim(s.substr(0, eq)))] = std::string(icl::trim(s.substr(eq + 1)));
  }
  if (auto it = kvs.find("seed"); it != kvs.end()) {
    kvs["base_seed"] = it->second;
    kvs.erase(it);
  }
  if (a.seed) kvs["base_seed"] = std::to_string(*a.seed);
  return kvs;
}

icl::TrainConfig effective_config(const CommonArgs& a, bool k_is_list) {
  return icl::TrainConfig::from_key_values(merged_key_values(a, k_is_list));
}

fs::path out_dir(const CommonArgs& a) {
  std::string dir = a.out_dir;
  if (dir.empty()) {
    if (const char* env = std::getenv("ICL_LAB_OUT"); env && *env) dir = env;
  }
  if (dir.empty()) dir = "icl_lab_out";
  fs::create_directories(dir);
  return dir;
}

void print_config(const icl::TrainConfig& c) {
  std::cout << "# effective config (fingerprint " << icl::hex64(c.fingerprint()) << ")\n" << c.to_text() << std::flush;
}

std::vector<std::size_t> k_values_or(const CommonArgs& a, std::size_t fallback_max) {
  return a.k.empty() ? parse_k_list("1.." + std::to_string(fallback_max)) : parse_k_list(a.k);
}

void write_reports(const icl::EvalReport& r, const fs::path& stem, const std::string& format, OutputGuard& guard) {
  if (format != "csv" && format != "json" && format != "both") throw icl::ConfigError("--format must be csv, json or both");
  if (format != "json") {
    const fs::path p = stem.string() + ".csv";
    guard.track(p);
    icl::emit_report(r, p.string(), icl::ReportFormat::csv);
    std::cout << "wrote " << p.string() << "\n";
  }
  if (format != "csv") {
    const fs::path p = stem.string() + ".json";
    guard.track(p);
    icl::emit_report(r, p.string(), icl::ReportFormat::json);
    std::cout << "wrote " << p.string() << "\n";
  }
}

int cmd_train(const CommonArgs& a) {
  const icl::TrainConfig c = effective_config(a, false);
  print_config(c);
  const fs::path dir = out_dir(a);
  OutputGuard guard;
  const fs::path cfg = dir / "config.txt", ckpt = dir / "model.ckpt", log = dir / "training_log.csv";
  guard.track(cfg);
  icl::write_text_file(cfg.string(), c.to_text());
  icl::TrainResult res;
  try {
    res = icl::train(c);
  } catch (const icl::TrainingAborted& e) {
    const auto& rows = e.log().rows;
    if (!rows.empty()) std::cerr << "last logged step " << rows.back().step << ", loss " << rows.back().loss << "\n";
    throw;
  }
  guard.track(log);
  res.log.write_csv(log.string());
  guard.track(ckpt);
  icl::save_checkpoint({c.to_text(), res.params}, ckpt.string());
  const auto& last = res.log.rows.back();
  std::cout << "steps " << res.log.rows.size() << ", final loss " << last.loss << ", clip events "
            << res.log.clip_events << ", wall " << res.log.wall_seconds << " s\n";
  if (res.log.best_val_mse) std::cout << "best val_mse " << *res.log.best_val_mse << " at step " << res.log.best_step << "\n";
  std::cout << "wrote " << ckpt.string() << " and " << log.string() << "\n";
  guard.commit();
  return 0;
}

int cmd_eval(const CommonArgs& a, const EvalArgs& e) {
  const fs::path dir = out_dir(a);
  const fs::path ckpt_path = e.checkpoint.empty() ? dir / "model.ckpt" : fs::path(e.checkpoint);
  if (!fs::exists(ckpt_path)) throw icl::IoError("missing checkpoint '" + ckpt_path.string() + "'");
  const icl::Checkpoint ck = icl::load_checkpoint(ckpt_path.string());
  const icl::TrainConfig trained = icl::TrainConfig::from_key_values(icl::parse_key_values(ck.config_text, ckpt_path.string()));

  // Task overrides apply on top of the checkpoint's config; the model is fixed.
  icl::KeyValues kvs = trained.to_key_values();
  icl::KeyValues extra;
  if (!a.config_path.empty()) extra = icl::read_key_values_file(a.config_path);
  if (!a.family.empty()) extra["family"] = a.family;
  if (a.d) extra["d"] = std::to_string(*a.d);
  for (const auto& s : a.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw icl::ConfigError("--set expects key=value, got '" + s + "'");
    extra[std::string(icl::trim(s.substr(0, eq)))] = std::string(icl::trim(s.substr(eq + 1)));
  }
  if (a.seed) extra["base_seed"] = std::to_string(*a.seed);
  for (const auto& [k, v] : extra) kvs[k] = v;
  const icl::TrainConfig c = icl::TrainConfig::from_key_values(kvs);
  if (!(c.model == trained.model)) throw icl::ConfigError("eval cannot change model keys of a checkpoint");
  print_config(c);

  std::optional<icl::OODKind> ood;
  if (!e.ood.empty() && e.ood != icl::kInDistribution) ood = icl::ood_kind_from_string(e.ood);
  const auto ks = k_values_or(a, c.task.k);
  const std::uint64_t checksum_before = icl::parameter_checksum(ck.params);
  icl::EvalReport r = icl::eval_mse_vs_context(c.model, ck.params, c.task, ks, e.episodes, icl::test_base_seed(c.base_seed), ood);
  if (icl::parameter_checksum(ck.params) != checksum_before) throw icl::Error("evaluation modified the parameters");
  r.checkpoint_fingerprint = icl::hex64(trained.fingerprint());
  r.seeds = {c.base_seed};
  OutputGuard guard;
  write_reports(r, dir / (ood ? "eval_report_" + e.ood : std::string("eval_report")), e.format, guard);
  guard.commit();
  return 0;
}

int cmd_baselines(const CommonArgs& a, const EvalArgs& e) {
  const icl::TrainConfig c = effective_config(a, true);
  print_config(c);
  std::optional<icl::OODKind> ood;
  if (!e.ood.empty() && e.ood != icl::kInDistribution) ood = icl::ood_kind_from_string(e.ood);
  const auto ks = k_values_or(a, c.task.k);
  icl::EvalReport r = icl::eval_baselines(c.task, ks, e.episodes, icl::test_base_seed(c.base_seed), ood);
  r.seeds = {c.base_seed};
  const fs::path dir = out_dir(a);
  OutputGuard guard;
  write_reports(r, dir / (ood ? "baselines_report_" + e.ood : std::string("baselines_report")), e.format, guard);
  guard.commit();
  return 0;
}

int cmd_dump(const CommonArgs& a, const EvalArgs& e) {
  const icl::TrainConfig c = effective_config(a, false);
  print_config(c);
  const fs::path dir = out_dir(a);
  const fs::path path = dir / "episodes.jsonl";
  OutputGuard guard;
  guard.track(path);
  const auto eps = icl::sample_episodes(c.task, c.task.d, c.task.k, c.base_seed, 0, e.count);
  std::ofstream os(path);
  if (!os) throw icl::IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& p : eps) os << icl::episode_to_json(p).dump() << "\n";
  os.close();
  if (!os) throw icl::IoError("write failed for '" + path.string() + "'");
  std::cout << "wrote " << eps.size() << " episodes to " << path.string() << "\n";
  guard.commit();
  return 0;
}

int cmd_schedule(const CommonArgs& a) {
  icl::CurriculumSchedule s;
  if (a.preset == "kernel" || a.preset.empty()) s = icl::CurriculumSchedule::kernel();
  else if (a.preset.rfind("dynamics", 0) == 0) s = icl::CurriculumSchedule::dynamics();
  else throw icl::ConfigError("schedule presets: kernel, dynamics");
  std::cout << "step,dim,prompt_len\n";
  for (const auto& [step, st] : icl::curriculum_table(s)) std::cout << step << "," << st.dim << "," << st.prompt_len << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-context learning lab: synthetic tasks, sequence models, baselines"};
  app.require_subcommand(1);
  CommonArgs a;
  EvalArgs e;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", a.config_path, "key = value config file");
    sub->add_option("--seed", a.seed, "base seed for all randomness");
    sub->add_option("--out", a.out_dir, "output directory (env ICL_LAB_OUT as fallback)");
    sub->add_option("--preset", a.preset, "linear | kernel | dynamics[-kind]");
    sub->add_option("--threads", a.threads, "worker threads (computation is single-threaded)")->check(CLI::PositiveNumber);
    sub->add_option("--set", a.sets, "key=value override (repeatable)");
    sub->add_option("--family", a.family, "task family");
    sub->add_option("--arch", a.arch, "transformer | transformer_blockwise | hyena | ssm");
    sub->add_option("--d", a.d, "input dimension");
  };

  auto* train = app.add_subcommand("train", "train a model; writes model.ckpt and training_log.csv");
  add_common(train);
  train->add_option("--k", a.k, "context length");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint against the baselines");
  add_common(eval);
  eval->add_option("--k", a.k, "k values: 11, 1,5,9 or 1..41[:step]");
  eval->add_option("--checkpoint", e.checkpoint, "checkpoint path (default <out>/model.ckpt)");
  eval->add_option("--episodes", e.episodes, "episodes per k")->check(CLI::PositiveNumber);
  eval->add_option("--ood", e.ood, "half_subspace | noisy_lr | orthogonal | random_quadrants | scaled | skewed");
  eval->add_option("--format", e.format, "csv | json | both");

  auto* base = app.add_subcommand("baselines", "baseline-only report");
  add_common(base);
  base->add_option("--k", a.k, "k values: 11, 1,5,9 or 1..41[:step]");
  base->add_option("--episodes", e.episodes, "episodes per k")->check(CLI::PositiveNumber);
  base->add_option("--ood", e.ood, "OOD kind");
  base->add_option("--format", e.format, "csv | json | both");

  auto* dump = app.add_subcommand("dump-episodes", "write sampled episodes as JSON lines");
  add_common(dump);
  dump->add_option("--k", a.k, "context length");
  dump->add_option("--count", e.count, "number of episodes")->check(CLI::PositiveNumber);

  auto* sched = app.add_subcommand("schedule", "print the curriculum table");
  sched->add_option("--preset", a.preset, "kernel | dynamics");

  CLI11_PARSE(app, argc, argv);
  try {
    if (a.threads != 1) std::cerr << "note: running single-threaded (--threads " << a.threads << " ignored)\n";
    if (*train) return cmd_train(a);
    if (*eval) return cmd_eval(a, e);
    if (*base) return cmd_baselines(a, e);
    if (*dump) return cmd_dump(a, e);
    if (*sched) return cmd_schedule(a);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 1;
}
