#pragma once

#include <functional>

#include "fav/bandwidth.hpp"
#include "fav/mlp.hpp"
#include "fav/optim.hpp"
#include "fav/velocity.hpp"

namespace fav {

// Optional affine lift psi(x) = A x + b applied before the transport field is
// computed; empty A means identity. The chain rule through it is
// d loss/dx = (d loss/d psi) A.
struct FeatureMap {
  Matrix A;  // q x d
  Vec b;     // q
  bool identity() const { return A.size() == 0; }
  Batch apply(const Eigen::Ref<const Batch>& X) const;
  Batch pullback(const Eigen::Ref<const Batch>& dPsi) const;
};

// A batch of generated samples plus the closure that turns a gradient with
// respect to those samples into parameter gradients. This is the only seam
// between the transport objective and a concrete generator.
struct SampleGraph {
  Batch x;  // n x d
  std::function<GradBundle(const Eigen::Ref<const Batch>&)> backward;
};

struct GeneratorHandle {
  Index dim = 2;
  MlpParams* params = nullptr;  // the one net being fine-tuned
  std::function<SampleGraph(Index, RngStream&)> sample_graph;
};

struct FavConfig {
  double beta = 1.0;
  // Transport/KDE width coupling tau = 2 sigma^2; `tau` is used when
  // `adaptive_bandwidth` is off, otherwise sigma comes from Scott's rule on
  // the reference batch with n = n_gen (the training batch size).
  double tau = 0.5;
  bool adaptive_bandwidth = false;
  Index n_gen = 256;
  Index n_ref = 256;
  TermMask terms;
  FeatureMap psi;
};

// Transport field for one generated batch against one reference batch, in
// feature space. Reports the bandwidth actually used via sigma_out.
VelocityReport fav_velocity(const Eigen::Ref<const Batch>& gen_x,
                            const Eigen::Ref<const Batch>& ref,
                            const RewardOracle& reward, const FavConfig& cfg,
                            double* sigma_out = nullptr);

// Mean squared transport magnitude (the convergence diagnostic): zero exactly
// when the generator distribution is a fixed point of the field.
double fav_eval_loss(const Eigen::Ref<const Batch>& gen_x,
                     const Eigen::Ref<const Batch>& ref,
                     const RewardOracle& reward, const FavConfig& cfg);

struct FavStepStats {
  double loss = 0.0;       // mean ||phi||^2 over the batch
  double grad_norm = 0.0;  // pre-clip parameter gradient norm
  double sigma = 0.0;      // KDE / transport width used
  bool far_from_support = false;
};

// One step of amortized transport: sample through the generator, regress the
// samples onto their stop-gradient transported positions x + phi(x), and
// apply the optimizer. The velocity itself is never differentiated through.
FavStepStats fav_train_step(GeneratorHandle& gen,
                            const Eigen::Ref<const Batch>& ref,
                            const RewardOracle& reward, const FavConfig& cfg,
                            const OptConfig& ocfg, OptState& opt,
                            RngStream& rng);

}  // namespace fav
