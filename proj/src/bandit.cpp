#include "fav/bandit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fav/bandwidth.hpp"
#include "fav/velocity.hpp"

namespace fav {

BanditTask make_bandit() {
  BanditTask t;
  t.mode_base.resize(3, 2);
  t.mode_base << 0.45, 0.30,    // covered by the behavior, drifted
      0.45, -0.30,              // covered by the behavior, drifted
      0.60, 0.0;                // never covered
  t.drift.resize(2, 2);
  // The displacement (0.6 in x) is what makes the dataset beatable: behavior
  // actions score Q ~ -(0.6^2 + 2 std^2) while the Q-tilted conditional sits
  // part of the way back toward the mode. Bunching the modes on one side of
  // the box keeps a uniform-random policy far from all of them, so the
  // random baseline lands clearly below the dataset. All cluster centers
  // stay well separated from every mode anchor and inside the action box.
  t.drift << -0.6, 0.0, -0.6, 0.0;
  return t;
}

Batch bandit_modes(const BanditTask& t, const Eigen::Ref<const Vec>& s) {
  return t.mode_base.rowwise() + t.state_gain * s.transpose();
}

Batch behavior_centers(const BanditTask& t, const Eigen::Ref<const Vec>& s) {
  Batch m = bandit_modes(t, s);
  return m.topRows(t.n_covered()) + t.drift;
}

namespace {

Index nearest_mode(const Batch& modes, const Eigen::Ref<const Vec>& a) {
  Index best = 0;
  double best_d = (a.transpose() - modes.row(0)).squaredNorm();
  for (Index k = 1; k < modes.rows(); ++k) {
    const double d = (a.transpose() - modes.row(k)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

Batch clip_actions(Batch a) { return a.cwiseMax(-1.0).cwiseMin(1.0); }

}  // namespace

double bandit_q(const BanditTask& t, const Eigen::Ref<const Vec>& s,
                const Eigen::Ref<const Vec>& a) {
  Batch m = bandit_modes(t, s);
  return -(m.rowwise() - a.transpose()).rowwise().squaredNorm().minCoeff();
}

Vec bandit_q_grad(const BanditTask& t, const Eigen::Ref<const Vec>& s,
                  const Eigen::Ref<const Vec>& a) {
  Batch m = bandit_modes(t, s);
  return -2.0 * (a - m.row(nearest_mode(m, a)).transpose());
}

BanditDataset build_dataset(const BanditTask& t, Index n_states,
                            Index actions_per_state, RngStream& rng) {
  require(n_states >= 100, "bandit: need at least 100 states");
  require(actions_per_state >= 1, "bandit: need at least one action per state");
  BanditDataset ds;
  const Index n = n_states * actions_per_state;
  ds.states.resize(n, 2);
  ds.actions.resize(n, 2);
  for (Index i = 0; i < n_states; ++i) {
    Vec s(2);
    s << 2.0 * rng.uniform() - 1.0, 2.0 * rng.uniform() - 1.0;
    Batch centers = behavior_centers(t, s);
    for (Index j = 0; j < actions_per_state; ++j) {
      const Index row = i * actions_per_state + j;
      const Index c = rng.uniform_index(centers.rows());
      Vec a = centers.row(c).transpose();
      a(0) += t.behavior_std * rng.normal();
      a(1) += t.behavior_std * rng.normal();
      ds.states.row(row) = s.transpose();
      ds.actions.row(row) = clip_actions(a.transpose());
    }
  }
  return ds;
}

CoverageStats dataset_coverage(const BanditTask& t, const BanditDataset& ds,
                               double radius) {
  require(ds.states.rows() == ds.actions.rows() && ds.states.rows() > 0,
          "bandit: malformed dataset");
  CoverageStats st;
  for (Index i = 0; i < ds.states.rows(); ++i)
    st.mean_q += bandit_q(t, ds.states.row(i).transpose(),
                          ds.actions.row(i).transpose());
  st.mean_q /= static_cast<double>(ds.states.rows());

  // Group rows by identical state (construction order keeps groups contiguous).
  Index states_total = 0, states_ok = 0;
  Index i = 0;
  while (i < ds.states.rows()) {
    Index j = i;
    while (j < ds.states.rows() &&
           (ds.states.row(j).array() == ds.states.row(i).array()).all())
      ++j;
    Vec s = ds.states.row(i).transpose();
    Batch centers = behavior_centers(t, s);
    Index hit = 0;
    for (Index k = 0; k < centers.rows(); ++k) {
      bool near = false;
      for (Index r = i; r < j && !near; ++r)
        near = (ds.actions.row(r) - centers.row(k)).norm() <= radius;
      if (near) ++hit;
    }
    ++states_total;
    if (hit >= 2) ++states_ok;
    i = j;
  }
  st.two_mode_fraction =
      static_cast<double>(states_ok) / static_cast<double>(states_total);
  return st;
}

PolicyModel policy_init(RngStream& rng, Index hidden_width,
                        Index hidden_layers) {
  MlpConfig cfg;
  cfg.input_dim = 4;
  cfg.output_dim = 2;
  cfg.hidden_width = hidden_width;
  cfg.hidden_layers = hidden_layers;
  return PolicyModel{mlp_init(cfg, rng)};
}

Batch policy_actions_raw(const PolicyModel& p,
                         const Eigen::Ref<const Batch>& states,
                         const Eigen::Ref<const Batch>& z) {
  require(states.rows() == z.rows(), "policy: state/noise size mismatch");
  Matrix X(states.rows(), 4);
  X.leftCols(2) = states;
  X.rightCols(2) = z;
  return mlp_forward(p.net, X);
}

Batch policy_actions(const PolicyModel& p, const Eigen::Ref<const Batch>& states,
                     RngStream& rng) {
  return clip_actions(
      policy_actions_raw(p, states, rng.normal_mat(states.rows(), 2)));
}

namespace {

// Indices of the k dataset rows with the nearest states; ties break toward
// the lower row index so the neighborhood is deterministic.
std::vector<Index> nearest_rows(const Eigen::Ref<const Batch>& data_states,
                                const Eigen::Ref<const Vec>& s, Index k) {
  const Index n = data_states.rows();
  Vec d2 = (data_states.rowwise() - s.transpose()).rowwise().squaredNorm();
  std::vector<Index> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  const Index kk = std::min(k, n);
  std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(),
                    [&](Index a, Index b) {
                      return d2(a) != d2(b) ? d2(a) < d2(b) : a < b;
                    });
  idx.resize(static_cast<size_t>(kk));
  return idx;
}

}  // namespace

PolicyStepStats fav_policy_step(PolicyModel& p,
                                const Eigen::Ref<const Batch>& states,
                                const BanditTask& task,
                                const BanditDataset& data,
                                const PolicyFtConfig& cfg,
                                const OptConfig& ocfg, OptState& opt,
                                RngStream& rng) {
  require(states.rows() >= 1, "policy step: empty state batch");
  require(data.states.rows() >= 1, "policy step: empty dataset");
  require(cfg.n_particles >= 2, "policy step: need >= 2 particles per state");
  const Index B = states.rows();
  const Index N = cfg.n_particles;

  // Noise first, then (for the zeroth-order path) per-state direction draws.
  Batch Z = rng.normal_mat(B * N, 2);
  Matrix X(B * N, 4);
  for (Index i = 0; i < B; ++i) {
    X.block(i * N, 0, N, 2).rowwise() = states.row(i);
    X.block(i * N, 2, N, 2) = Z.middleRows(i * N, N);
  }
  MlpWorkspace ws;
  Batch A = mlp_forward(p.net, X, &ws);

  PolicyStepStats st;
  Batch dA = Batch::Zero(B * N, 2);
  double loss_acc = 0.0, sigma_acc = 0.0;
  Index groups = 0;
  for (Index i = 0; i < B; ++i) {
    Vec s = states.row(i).transpose();
    std::vector<Index> nb = nearest_rows(data.states, s, cfg.k_neighbors);
    if (nb.empty()) {
      ++st.skipped_states;
      continue;
    }
    Batch refs(static_cast<Index>(nb.size()), 2);
    for (size_t r = 0; r < nb.size(); ++r)
      refs.row(static_cast<Index>(r)) = data.actions.row(nb[r]);

    const double sigma = cfg.adaptive_bandwidth ? scott_bandwidth(refs)
                                                : sigma_from_tau(cfg.tau);
    Batch part = A.middleRows(i * N, N);
    Batch G(N, 2);
    for (Index j = 0; j < N; ++j) {
      Vec a = part.row(j).transpose();
      if (cfg.zeroth_order) {
        auto q = [&](const Eigen::Ref<const Vec>& act) {
          return bandit_q(task, s, act);
        };
        G.row(j) =
            zeroth_order_grad(q, a, cfg.zo_eta, cfg.zo_k, rng).transpose();
      } else {
        G.row(j) = bandit_q_grad(task, s, a).transpose();
      }
    }
    VelocityReport rep =
        stein_velocity_kde(part, part, refs, sigma, G, cfg.beta);
    loss_acc += rep.total.squaredNorm();
    dA.middleRows(i * N, N) = rep.total;
    sigma_acc += sigma;
    ++groups;
  }
  require(groups > 0, "policy step: every state was skipped");

  const double scale = static_cast<double>(B * N);
  st.loss = loss_acc / scale;
  st.sigma_mean = sigma_acc / static_cast<double>(groups);
  dA *= -2.0 / scale;

  GradBundle g = grad_zeros_like(p.net);
  (void)mlp_backward(p.net, ws, dA, g);
  st.grad_norm = opt_step(opt, ocfg, {&p.net}, {&g});
  return st;
}

PolicyEval evaluate_policy(const ActionSampler& sample, const BanditTask& t,
                           Index n_eval, RngStream& rng) {
  require(n_eval >= 1000, "evaluate_policy: need at least 1000 states");
  Batch states(n_eval, 2);
  for (Index i = 0; i < n_eval; ++i) {
    states(i, 0) = 2.0 * rng.uniform() - 1.0;
    states(i, 1) = 2.0 * rng.uniform() - 1.0;
  }
  Batch actions = sample(states, rng);
  require(actions.rows() == n_eval && actions.cols() == 2,
          "evaluate_policy: sampler shape mismatch");

  PolicyEval ev;
  ev.mode_coverage = Vec::Zero(t.n_modes());
  for (Index i = 0; i < n_eval; ++i) {
    Vec s = states.row(i).transpose();
    Vec a = actions.row(i).transpose();
    ev.mean_q += bandit_q(t, s, a);
    Batch centers = behavior_centers(t, s);
    const double d =
        (centers.rowwise() - a.transpose()).rowwise().norm().minCoeff();
    if (d <= t.support_radius) ev.in_support += 1.0;
    ev.mode_coverage(nearest_mode(bandit_modes(t, s), a)) += 1.0;
  }
  const double n = static_cast<double>(n_eval);
  ev.mean_q /= n;
  ev.in_support /= n;
  ev.mode_coverage /= n;
  return ev;
}

PolicyEval evaluate_policy(const PolicyModel& p, const BanditTask& t,
                           Index n_eval, RngStream& rng) {
  return evaluate_policy(
      [&](const Eigen::Ref<const Batch>& s, RngStream& r) {
        return policy_actions(p, s, r);
      },
      t, n_eval, rng);
}

Checkpoint to_checkpoint(const PolicyModel& p) {
  Checkpoint ck;
  ck.flavor = "policy";
  ck.meta_json = "{}";
  ck.nets.push_back({"net", p.net});
  return ck;
}

PolicyModel policy_from_checkpoint(const Checkpoint& ck) {
  require(ck.flavor == "policy", "checkpoint flavor mismatch: want policy");
  return PolicyModel{checkpoint_net(ck, "net")};
}

}  // namespace fav
