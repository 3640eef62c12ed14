#pragma once

#include "fav/amortize.hpp"
#include "fav/checkpoint.hpp"
#include "fav/mlp.hpp"
#include "fav/optim.hpp"
#include "fav/rng.hpp"

namespace fav {

// Small Gaussian VAE on 2-D data: encoder emits (mu, logvar) of an 8-D
// latent, the decoder maps latents back. logvar is clamped to +-8 before use
// and the clamp zeroes the gradient outside that band.
struct VaeModel {
  MlpParams encoder;  // 2 -> 2 d_z
  MlpParams decoder;  // d_z -> 2
  Index d_z = 8;
  double beta_kl = 0.02;
  double logvar_clamp = 8.0;
};

VaeModel vae_init(RngStream& rng, Index hidden_width = 256,
                  Index hidden_layers = 3, Index d_z = 8);

struct VaeLossStats {
  double loss = 0.0;
  double recon = 0.0;  // mean over the batch of 1/2 ||x - xhat||^2
  double kl = 0.0;     // mean closed-form Gaussian KL to N(0, I)
};

// Negative ELBO with reparameterized z = mu + exp(logvar/2) * eps. The
// explicit-eps overload exists so tests can freeze the noise; the rng
// overload draws eps as one normal_mat(n, d_z) and delegates.
VaeLossStats vae_loss(const VaeModel& m, const Eigen::Ref<const Batch>& x,
                      const Eigen::Ref<const Batch>& eps,
                      GradBundle* denc = nullptr, GradBundle* ddec = nullptr);
VaeLossStats vae_loss(const VaeModel& m, const Eigen::Ref<const Batch>& x,
                      RngStream& rng, GradBundle* denc = nullptr,
                      GradBundle* ddec = nullptr);

// One optimizer step on encoder+decoder jointly; `opt` must come from
// opt_init({&m.encoder, &m.decoder}).
VaeLossStats vae_train_step(VaeModel& m, const Eigen::Ref<const Batch>& x,
                            const OptConfig& ocfg, OptState& opt,
                            RngStream& rng);

Batch vae_sample(const VaeModel& m, Index n, RngStream& rng);

// Decoder-only fine-tuning handle: z ~ N(0, I_{d_z}) through the decoder.
GeneratorHandle vae_generator(VaeModel& m);

Checkpoint to_checkpoint(const VaeModel& m);
VaeModel vae_from_checkpoint(const Checkpoint& ck);

}  // namespace fav
