#pragma once

#include <optional>

#include "fav/mixture.hpp"
#include "fav/quadrature.hpp"
#include "fav/reward.hpp"
#include "fav/rng.hpp"

namespace fav {

// Reward-tilted distribution q(x) ∝ p(x) * exp(beta * r(x)) over a 2-D base
// mixture. The normalizer is computed on demand by grid quadrature over
// `box` and cached; the box must cover essentially all of the base mass.
struct TiltedTarget {
  GaussianMixture base;
  RewardOracle reward;
  double beta = 1.0;
  GridBox box{};

  mutable std::optional<double> log_z_cache;
};

TiltedTarget make_tilted(const GaussianMixture& base, const SoftClusterReward& r,
                         double beta, GridBox box = {});

// log p(x) + beta * r(x), minus log Z when `normalized`.
double tilted_logpdf(const TiltedTarget& t, const Eigen::Ref<const Vec>& x,
                     bool normalized = true);

double tilted_log_z(const TiltedTarget& t);

// Normalized density evaluated on every cell of t.box (row i = x index,
// col j = y index, matching GridBox::coord).
Matrix tilted_density_grid(const TiltedTarget& t);

// Exact sampling by rejection from the base mixture with envelope constant 1;
// requires beta >= 0 and r <= 0 so that exp(beta*r) is a valid acceptance
// probability. Optionally reports the observed acceptance rate.
Batch tilted_sample_rejection(const TiltedTarget& t, Index n, RngStream& rng,
                              double* acceptance_rate = nullptr);

// Mass of each base component's nearest-center cell under the tilted density,
// by quadrature over t.box.
Vec tilted_mode_masses(const TiltedTarget& t);

}  // namespace fav
