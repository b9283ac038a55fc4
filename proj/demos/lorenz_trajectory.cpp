// SPDX-License-Identifier: Apache-2.0
//
// Rolls out the Lorenz system from two nearby initial states and prints how
// far apart they drift. Writes the first trajectory to lorenz.csv.

#include <cmath>
#include <cstdio>

#include "icl_lab.hpp"

int main() {
  icl::DynamicsSpec spec;
  spec.kind = icl::DynamicsKind::lorenz;
  spec.state_dim = 3;
  icl::Rng rng(1);
  const icl::Vec readout{1.0, 0.0, 0.0};
  const icl::Vec x0{1.0, 1.0, 1.0};
  icl::Vec x1 = x0;
  x1[0] += 1e-8;
  const auto a = icl::roll_out(spec, x0, 5000, readout, 0.0, rng);
  const auto b = icl::roll_out(spec, x1, 5000, readout, 0.0, rng);
  for (std::size_t t = 0; t <= 5000; t += 500) {
    std::printf("t=%5zu  separation %.3e\n", t, std::sqrt(icl::squared_distance(a.states[t], b.states[t])));
  }
  icl::write_trajectory_csv(a, "lorenz.csv");
  return 0;
}
