#pragma once

#include "fav/tilted.hpp"
#include "fav/velocity.hpp"

namespace fav {

// Particle transport toward a tilted target with the exact base score. Serves
// as the non-amortized gold sampler the trained generators are compared to.
struct SvgdConfig {
  Index n_particles = 512;
  Index n_iters = 500;
  double step_size = 0.05;
  double init_std = 2.0;  // particles start from N(0, init_std^2 I)
  KernelSpec kernel{KernelFamily::gaussian_rbf, 0.5};
  // Divergence guard: if the mean particle norm passes this, halve the step
  // and restart from the same initial particles.
  double divergence_norm = 1e3;
  int max_restarts = 12;
};

struct SvgdResult {
  Batch particles;
  int restarts = 0;
  double final_step = 0.0;
};

SvgdResult svgd_sample(const TiltedTarget& target, const SvgdConfig& cfg,
                       RngStream& rng);

}  // namespace fav
