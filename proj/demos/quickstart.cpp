// SPDX-License-Identifier: Apache-2.0
//
// Trains a small transformer on linear-regression prompts for a few hundred
// steps and compares it with the baselines at a handful of context lengths.

#include <cstdio>

#include "icl_lab.hpp"

int main() {
  icl::TrainConfig cfg;
  cfg.task.family = icl::Family::linear;
  cfg.task.d = 3;
  cfg.task.k = 7;
  cfg.model = icl::model_preset(icl::Arch::transformer);
  cfg.batch_size = 32;
  cfg.total_steps = 300;
  cfg.warmup_steps = 30;
  cfg.lr = 1e-3;
  cfg.eval_every = 100;
  cfg.val_episodes = 100;
  cfg.base_seed = 7;

  const icl::TrainResult run = icl::train(cfg);
  for (const auto& row : run.log.rows) {
    if (row.val_mse) std::printf("step %5zu  loss %.4f  val_mse %.4f\n", row.step, row.loss, *row.val_mse);
  }

  const icl::EvalReport report =
      icl::eval_mse_vs_context(cfg.model, run.params, cfg.task, {1, 3, 5, 7}, 200, icl::test_base_seed(cfg.base_seed));
  std::printf("\n%4s %10s %10s %10s %10s %10s\n", "k", "model", "zero", "lsq", "knn3", "avg");
  for (const auto& r : report.rows) {
    std::printf("%4zu %10.4f %10.4f %10.4f %10.4f %10.4f\n", r.k, *r.model_mse, r.baseline(icl::BaselineKind::zero),
                r.baseline(icl::BaselineKind::least_squares), r.baseline(icl::BaselineKind::knn3),
                r.baseline(icl::BaselineKind::averaging));
  }
  return 0;
}
