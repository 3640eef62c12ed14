#pragma once

#include "fav/amortize.hpp"
#include "fav/checkpoint.hpp"
#include "fav/mlp.hpp"
#include "fav/optim.hpp"
#include "fav/rng.hpp"

namespace fav {

// One-step pushforward generator trained by drifting: samples are nudged
// along a field built from kernel affinities to a data batch (positives) and
// the generated batch itself (negatives).
struct DriftingModel {
  MlpParams net;  // latent_dim -> 2
  Index latent_dim = 32;
  double tau_drift = 0.15;  // non-squared-exponential kernel width
};

DriftingModel drifting_init(RngStream& rng, Index hidden_width = 256,
                            Index hidden_layers = 3, Index latent_dim = 32);

struct DriftField {
  Batch v;  // field at each evaluation row
  bool underflow = false;
};

// V(x) = E[k(x,y+) k(x,y-) (y+ - y-)] / (Z+ Z-) with k the L2-norm
// exponential kernel, Z+- the mean affinities. Evaluated in the factorized
// form A+ Z- - A- Z+ over the product floor max(Z+ Z-, 1e-30); the floor is
// only reachable when every affinity underflowed, which also sets the flag.
DriftField drifting_field(const Eigen::Ref<const Batch>& at,
                          const Eigen::Ref<const Batch>& positives,
                          const Eigen::Ref<const Batch>& negatives, double tau);
Vec drifting_field_point(const Eigen::Ref<const Vec>& x,
                         const Eigen::Ref<const Batch>& positives,
                         const Eigen::Ref<const Batch>& negatives, double tau,
                         bool* underflow = nullptr);

struct DriftStepStats {
  double loss = 0.0;       // mean ||V||^2 over the generated batch
  double grad_norm = 0.0;  // pre-clip
  bool underflow = false;
};

// Loss with frozen latent noise: generate x = f(eps), drift against the data
// batch, regress x onto stopgrad(x + V).
DriftStepStats drifting_loss(const DriftingModel& m,
                             const Eigen::Ref<const Batch>& data,
                             const Eigen::Ref<const Batch>& eps,
                             GradBundle* g = nullptr);

DriftStepStats drifting_train_step(DriftingModel& m,
                                   const Eigen::Ref<const Batch>& data,
                                   const OptConfig& ocfg, OptState& opt,
                                   RngStream& rng);

Batch drifting_sample(const DriftingModel& m, Index n, RngStream& rng);

GeneratorHandle drifting_generator(DriftingModel& m);

Checkpoint to_checkpoint(const DriftingModel& m);
DriftingModel drifting_from_checkpoint(const Checkpoint& ck);

}  // namespace fav
