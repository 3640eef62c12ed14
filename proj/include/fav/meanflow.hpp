#pragma once

#include "fav/amortize.hpp"
#include "fav/checkpoint.hpp"
#include "fav/mlp.hpp"
#include "fav/optim.hpp"
#include "fav/rng.hpp"

namespace fav {

// Average-velocity flow model u_theta(x_t, r, t) on 2-D data, fed to the net
// as the 4-vector [x_t, t, t - r]. Trained against the self-consistency
// target u* = stopgrad(v_t - (t - r) du/dt) with an adaptively weighted MSE.
struct MeanFlowModel {
  MlpParams net;  // 4 -> 2
  double p_eq = 0.5;          // probability of collapsing r to t
  double weight_power = 1.0;  // p in 1/(sg||u-u*||^2 + c)^p
  double weight_floor = 1e-2;
};

MeanFlowModel meanflow_init(RngStream& rng, Index hidden_width = 256,
                            Index hidden_layers = 3);

// Two sigmoid(N(-0.4, 1)) draws ordered into t = max, r = min; with
// probability p_eq the pair collapses to r = t. Always 0 <= r <= t <= 1.
// Consumes two normals then one uniform.
void sample_tr(double p_eq, RngStream& rng, double& t, double& r);

struct MfStepStats {
  double loss = 0.0;
  double grad_norm = 0.0;  // pre-clip
};

// Loss on explicit draws so tests can freeze them: x_t = (1-t) x0 + t x1,
// v = x1 - x0, du/dt through the forward-mode derivative along (v, 1, 1) in
// the [x, t, t-r] input layout (x_t and both time channels move with t).
// Both the target and the per-row weight are stop-gradients.
MfStepStats meanflow_loss(const MeanFlowModel& m,
                          const Eigen::Ref<const Batch>& x0,
                          const Eigen::Ref<const Batch>& x1,
                          const Eigen::Ref<const Vec>& t,
                          const Eigen::Ref<const Vec>& r,
                          GradBundle* g = nullptr);

// Draw order per step: x1 = normal_mat(n, 2), then per row sample_tr.
MfStepStats meanflow_train_step(MeanFlowModel& m,
                                const Eigen::Ref<const Batch>& data,
                                const OptConfig& ocfg, OptState& opt,
                                RngStream& rng);

// Jump sampler on the uniform grid 1 = t_0 > ... > t_steps = 0:
//   x_{t_{k+1}} = x_{t_k} - (t_k - t_{k+1}) u_theta(x_{t_k}, t_{k+1}, t_k),
// starting from x ~ N(0, I_2). steps must be one of {1, 2, 4, 8, 16}.
Batch meanflow_sample(const MeanFlowModel& m, Index n, Index steps,
                      RngStream& rng);

// Fine-tuning handle through the `steps`-step sampler; the backward pass
// chains through every net application.
GeneratorHandle meanflow_generator(MeanFlowModel& m, Index steps = 1);

Checkpoint to_checkpoint(const MeanFlowModel& m);
MeanFlowModel meanflow_from_checkpoint(const Checkpoint& ck);

}  // namespace fav
