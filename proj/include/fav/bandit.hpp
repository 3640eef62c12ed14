#pragma once

#include <cstdint>

#include "fav/amortize.hpp"
#include "fav/checkpoint.hpp"
#include "fav/mlp.hpp"
#include "fav/optim.hpp"
#include "fav/rng.hpp"

namespace fav {

// Synthetic continuous-action bandit for conditional transport at desk scale.
// Each 2-D state has three analytic action modes; the scalar objective is
// Q(s,a) = -min_k ||a - m_k(s)||^2. The behavior policy is an equal-weight
// Gaussian mixture (std 0.15) around the first two modes, each displaced by a
// fixed drift, so the dataset is deliberately suboptimal: a Q-tilted policy
// can beat the dataset's mean Q while staying inside the data support.
struct BanditTask {
  Batch mode_base;      // 3 x 2 anchors of the action modes
  double state_gain = 0.15;   // modes translate with the state
  Batch drift;          // 2 x 2 displacement of the behavior clusters
  double behavior_std = 0.15;
  double support_radius = 0.3;

  Index n_modes() const { return mode_base.rows(); }
  Index n_covered() const { return drift.rows(); }  // modes 0..n_covered-1
};

BanditTask make_bandit();

// Action modes at state s: m_k(s) = mode_base[k] + state_gain * s.
Batch bandit_modes(const BanditTask& t, const Eigen::Ref<const Vec>& s);

// Behavior cluster centers at s: m_k(s) + drift[k] for the covered modes.
Batch behavior_centers(const BanditTask& t, const Eigen::Ref<const Vec>& s);

double bandit_q(const BanditTask& t, const Eigen::Ref<const Vec>& s,
                const Eigen::Ref<const Vec>& a);

// dQ/da = -2 (a - m_k*) for the nearest mode k* (lowest index on ties).
Vec bandit_q_grad(const BanditTask& t, const Eigen::Ref<const Vec>& s,
                  const Eigen::Ref<const Vec>& a);

struct BanditDataset {
  Batch states;   // n x 2
  Batch actions;  // n x 2, clipped to [-1, 1]
};

// n_states states uniform on [-1,1]^2, actions_per_state behavior actions
// each. Per action: one uniform (cluster choice), then two normals.
BanditDataset build_dataset(const BanditTask& t, Index n_states,
                            Index actions_per_state, RngStream& rng);

struct CoverageStats {
  double mean_q = 0.0;          // over dataset (s, a) pairs
  double two_mode_fraction = 0.0;  // states with actions near >= 2 clusters
};

// "Near" means within `radius` of a behavior cluster center at that state.
CoverageStats dataset_coverage(const BanditTask& t, const BanditDataset& ds,
                               double radius);

// Single-forward-pass conditional generator a = net([s; z]), z ~ N(0, I_2).
struct PolicyModel {
  MlpParams net;  // 4 -> 2
};

PolicyModel policy_init(RngStream& rng, Index hidden_width = 256,
                        Index hidden_layers = 3);

// Raw network actions for given noise; training operates on these.
Batch policy_actions_raw(const PolicyModel& p,
                         const Eigen::Ref<const Batch>& states,
                         const Eigen::Ref<const Batch>& z);

// Emitted actions: one noise draw per state, clipped to [-1, 1].
Batch policy_actions(const PolicyModel& p, const Eigen::Ref<const Batch>& states,
                     RngStream& rng);

struct PolicyFtConfig {
  double beta = 2.0;
  double tau = 0.02;       // transport/KDE kernel width, tau = 2 sigma^2
  bool adaptive_bandwidth = false;  // Scott's rule on each reference set
  Index n_particles = 8;   // generated actions per state
  Index k_neighbors = 32;  // reference actions from nearest dataset states
  bool zeroth_order = false;  // estimate dQ/da from values only
  double zo_eta = 1e-3;
  Index zo_k = 64;
};

struct PolicyStepStats {
  double loss = 0.0;       // mean squared velocity over all particles
  double grad_norm = 0.0;  // pre-clip
  double sigma_mean = 0.0;
  Index skipped_states = 0;  // states with an empty reference neighborhood
};

// One conditional transport step over a batch of states: per state, draw
// particles, estimate the drift against that state's reference actions, and
// regress every particle onto its stop-gradient drifted target.
PolicyStepStats fav_policy_step(PolicyModel& p,
                                const Eigen::Ref<const Batch>& states,
                                const BanditTask& task,
                                const BanditDataset& data,
                                const PolicyFtConfig& cfg,
                                const OptConfig& ocfg, OptState& opt,
                                RngStream& rng);

struct PolicyEval {
  double mean_q = 0.0;
  double in_support = 0.0;  // within support_radius of a behavior center
  Vec mode_coverage;        // nearest-mode histogram over emitted actions
};

// States uniform on [-1,1]^2; actions from the sampler, assumed clipped.
using ActionSampler =
    std::function<Batch(const Eigen::Ref<const Batch>& states, RngStream&)>;
PolicyEval evaluate_policy(const ActionSampler& sample, const BanditTask& t,
                           Index n_eval, RngStream& rng);
PolicyEval evaluate_policy(const PolicyModel& p, const BanditTask& t,
                           Index n_eval, RngStream& rng);

Checkpoint to_checkpoint(const PolicyModel& p);
PolicyModel policy_from_checkpoint(const Checkpoint& ck);

}  // namespace fav
