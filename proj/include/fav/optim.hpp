#pragma once

#include <vector>

#include "fav/mlp.hpp"

namespace fav {

// Adam with decoupled weight decay (AdamW when weight_decay > 0) and optional
// global-norm gradient clipping across every net updated in the same step.
struct OptConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 0.0;  // 0 disables clipping
};

struct OptState {
  std::vector<GradBundle> m;
  std::vector<GradBundle> v;
  int64_t t = 0;
};

OptState opt_init(const std::vector<const MlpParams*>& nets);

// One step over nets[i] with grads[i]; all nets share the bias-correction
// counter and the clip norm. Returns the pre-clip global gradient norm.
double opt_step(OptState& st, const OptConfig& cfg,
                const std::vector<MlpParams*>& nets,
                const std::vector<const GradBundle*>& grads);

}  // namespace fav
