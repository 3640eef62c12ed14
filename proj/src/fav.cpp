#include <cmath>
#include <memory>

#include "fav/amortize.hpp"
#include "fav/bandwidth.hpp"
#include "fav/mixture.hpp"
#include "fav/svgd.hpp"
#include "fav/velocity.hpp"

namespace fav {

namespace {

// Exact pairwise squared distances via row differences. Slower than the Gram
// expansion but free of its cancellation error; the velocity paths need the
// two forms of the field to agree to ~1e-12, which rules the expansion out.
Matrix sqdist_rows(const Eigen::Ref<const Batch>& A,
                   const Eigen::Ref<const Batch>& B) {
  Matrix D(A.rows(), B.rows());
  for (Index i = 0; i < A.rows(); ++i)
    D.row(i) = (B.rowwise() - A.row(i)).rowwise().squaredNorm().transpose();
  return D;
}

constexpr double kFarLogit = -700.0;  // exp underflow threshold

}  // namespace

double scott_bandwidth(const Eigen::Ref<const Batch>& X, Index n) {
  require(X.rows() >= 2, "bandwidth: need at least two rows of data");
  require(X.cols() >= 1, "bandwidth: empty dimension");
  require(n >= 1, "bandwidth: batch size must be positive");
  Eigen::RowVectorXd mu = X.colwise().mean();
  Eigen::RowVectorXd var =
      (X.rowwise() - mu).array().square().colwise().sum() /
      static_cast<double>(X.rows());
  const double sbar = var.array().sqrt().mean();
  const double d = static_cast<double>(X.cols());
  const double h = std::pow(static_cast<double>(n), -1.0 / (d + 4.0)) * sbar;
  require(h > 0.0, "bandwidth: data has zero spread");
  return h;
}

double scott_bandwidth(const Eigen::Ref<const Batch>& X) {
  return scott_bandwidth(X, X.rows());
}

KdeScore kde_score(const Eigen::Ref<const Batch>& query,
                   const Eigen::Ref<const Batch>& ref, double sigma) {
  require(sigma > 0.0, "kde score: sigma must be positive");
  require(ref.rows() >= 1, "kde score: empty reference set");
  require(query.cols() == ref.cols(), "kde score: dimension mismatch");
  const double s2 = sigma * sigma;
  KdeScore out;
  out.score.resize(query.rows(), query.cols());
  out.far.assign(static_cast<size_t>(query.rows()), 0);
  for (Index i = 0; i < query.rows(); ++i) {
    Vec d2 = (ref.rowwise() - query.row(i)).rowwise().squaredNorm();
    Vec logits = -d2 / (2.0 * s2);
    const double m = logits.maxCoeff();
    if (m < kFarLogit) {
      out.far[static_cast<size_t>(i)] = 1;
      out.any_far = true;
    }
    Vec w = (logits.array() - m).exp();
    w /= w.sum();
    out.score.row(i) = (w.transpose() * ref - query.row(i)) / s2;
  }
  check_finite(out.score, "kde score");
  return out;
}

VelocityReport stein_velocity_exact(const Eigen::Ref<const Batch>& eval,
                                    const Eigen::Ref<const Batch>& source,
                                    const Eigen::Ref<const Batch>& source_score,
                                    const Eigen::Ref<const Batch>& source_reward_grad,
                                    const KernelSpec& kernel, double beta,
                                    const TermMask& mask) {
  require(kernel.tau > 0.0, "velocity: kernel width must be positive");
  require(eval.cols() == source.cols(), "velocity: dimension mismatch");
  if (mask.prior)
    require(source_score.rows() == source.rows() &&
                source_score.cols() == source.cols(),
            "velocity: score shape mismatch");
  if (mask.reward)
    require(source_reward_grad.rows() == source.rows() &&
                source_reward_grad.cols() == source.cols(),
            "velocity: reward gradient shape mismatch");
  if (mask.repulsive)
    require(kernel.family == KernelFamily::gaussian_rbf,
            "velocity: repulsive term needs a differentiable (Gaussian) kernel");

  const double invn = 1.0 / static_cast<double>(source.rows());
  Matrix D = sqdist_rows(source, eval);
  Matrix K;
  if (kernel.family == KernelFamily::gaussian_rbf)
    K = (-D / kernel.tau).array().exp().matrix();
  else
    K = (-D.array().sqrt() / kernel.tau).exp().matrix();

  VelocityReport rep;
  const Batch zeros = Batch::Zero(eval.rows(), eval.cols());
  rep.prior = mask.prior ? Batch(invn * (K.transpose() * source_score)) : zeros;
  rep.reward = mask.reward
                   ? Batch(beta * invn * (K.transpose() * source_reward_grad))
                   : zeros;
  if (mask.repulsive) {
    Vec ksum = K.colwise().sum().transpose();
    rep.repulsive =
        (2.0 / kernel.tau) * invn *
        ((eval.array().colwise() * ksum.array()).matrix() - K.transpose() * source);
  } else {
    rep.repulsive = zeros;
  }
  rep.total = rep.prior + rep.reward + rep.repulsive;
  check_finite(rep.total, "transport velocity");
  return rep;
}

VelocityReport stein_velocity_kde(const Eigen::Ref<const Batch>& eval,
                                  const Eigen::Ref<const Batch>& source,
                                  const Eigen::Ref<const Batch>& ref,
                                  double sigma,
                                  const Eigen::Ref<const Batch>& source_reward_grad,
                                  double beta, const TermMask& mask) {
  require(sigma > 0.0, "velocity: sigma must be positive");
  require(eval.cols() == source.cols() && source.cols() == ref.cols(),
          "velocity: dimension mismatch");
  require(ref.rows() >= 1, "velocity: empty reference set");
  if (mask.reward)
    require(source_reward_grad.rows() == source.rows() &&
                source_reward_grad.cols() == source.cols(),
            "velocity: reward gradient shape mismatch");

  const Index n = source.rows();
  const Index d = source.cols();
  const double s2 = sigma * sigma;
  const double tau = 2.0 * s2;
  const double invn = 1.0 / static_cast<double>(n);

  VelocityReport rep;

  // Inner sum of the sample-only field: normalized kernel weights over the
  // reference set pulling each source point toward the data (the mean-shift
  // direction), written out per row.
  Batch mean_shift = Batch::Zero(n, d);
  for (Index j = 0; j < n; ++j) {
    Vec d2 = (ref.rowwise() - source.row(j)).rowwise().squaredNorm();
    Vec logits = -d2 / (2.0 * s2);
    const double m = logits.maxCoeff();
    if (m < kFarLogit) rep.far_from_support = true;
    Vec w = (logits.array() - m).exp();
    w /= w.sum();
    mean_shift.row(j) = (w.transpose() * ref - source.row(j)) / s2;
  }

  rep.prior.setZero(eval.rows(), d);
  rep.reward.setZero(eval.rows(), d);
  rep.repulsive.setZero(eval.rows(), d);
  // Outer sum: smooth every term by the transport kernel of the same width.
  for (Index e = 0; e < eval.rows(); ++e) {
    Vec d2 = (source.rowwise() - eval.row(e)).rowwise().squaredNorm();
    Vec k = (-d2 / tau).array().exp();
    if (mask.prior) rep.prior.row(e) = invn * (k.transpose() * mean_shift);
    if (mask.reward)
      rep.reward.row(e) = beta * invn * (k.transpose() * source_reward_grad);
    if (mask.repulsive)
      rep.repulsive.row(e) =
          invn / s2 * (k.sum() * eval.row(e) - k.transpose() * source);
  }
  rep.total = rep.prior + rep.reward + rep.repulsive;
  check_finite(rep.total, "transport velocity");
  return rep;
}

Vec zeroth_order_grad(const std::function<double(const Eigen::Ref<const Vec>&)>& f,
                      const Eigen::Ref<const Vec>& x, double eta, Index k,
                      RngStream& rng) {
  require(static_cast<bool>(f), "zeroth-order: missing function");
  require(eta > 0.0, "zeroth-order: probe radius must be positive");
  require(k >= 1, "zeroth-order: need at least one direction");
  Vec g = Vec::Zero(x.size());
  Vec u(x.size());
  for (Index i = 0; i < k; ++i) {
    for (Index j = 0; j < x.size(); ++j) u(j) = rng.normal();
    const double df = (f(x + eta * u) - f(x - eta * u)) / (2.0 * eta);
    g += df * u;
  }
  return g / static_cast<double>(k);
}

RewardOracle zeroth_order_oracle(
    std::function<double(const Eigen::Ref<const Vec>&)> value, double eta,
    Index k, uint64_t seed) {
  require(static_cast<bool>(value), "zeroth-order: missing value function");
  auto st = std::make_shared<RngStream>(seed);
  RewardOracle o;
  o.value = value;
  o.grad = [value, eta, k, st](const Eigen::Ref<const Vec>& x) {
    return zeroth_order_grad(value, x, eta, k, *st);
  };
  o.grad_rows = [value, eta, k, st](const Eigen::Ref<const Batch>& X) {
    Batch g(X.rows(), X.cols());
    for (Index i = 0; i < X.rows(); ++i)
      g.row(i) =
          zeroth_order_grad(value, X.row(i).transpose(), eta, k, *st).transpose();
    return g;
  };
  return o;
}

SvgdResult svgd_sample(const TiltedTarget& target, const SvgdConfig& cfg,
                       RngStream& rng) {
  require(cfg.n_particles >= 1, "svgd: need particles");
  require(cfg.n_iters >= 1, "svgd: need iterations");
  require(cfg.step_size > 0.0 && cfg.init_std > 0.0 && cfg.divergence_norm > 0.0,
          "svgd: non-positive configuration");
  const Index d = target.base.dim();
  const Batch init = cfg.init_std * rng.normal_mat(cfg.n_particles, d);

  double eps = cfg.step_size;
  int restarts = 0;
  Batch x = init;
  Index it = 0;
  while (it < cfg.n_iters) {
    Batch score = mixture_score_rows(target.base, x);
    Batch g = oracle_grad_rows(target.reward, x);
    VelocityReport rep =
        stein_velocity_exact(x, x, score, g, cfg.kernel, target.beta);
    x += eps * rep.total;
    ++it;
    const double mean_norm = x.rowwise().norm().mean();
    if (!std::isfinite(mean_norm) || mean_norm > cfg.divergence_norm) {
      if (++restarts > cfg.max_restarts)
        throw std::runtime_error(
            "svgd: diverged after exhausting step-size restarts");
      eps *= 0.5;
      x = init;
      it = 0;
    }
  }
  return {std::move(x), restarts, eps};
}

// ---------------------------------------------------------------------------
// Amortization
// ---------------------------------------------------------------------------

Batch FeatureMap::apply(const Eigen::Ref<const Batch>& X) const {
  if (identity()) return X;
  require(A.cols() == X.cols(), "feature map: dimension mismatch");
  Batch Y = X * A.transpose();
  if (b.size() > 0) {
    require(b.size() == A.rows(), "feature map: offset size mismatch");
    Y.rowwise() += b.transpose();
  }
  return Y;
}

Batch FeatureMap::pullback(const Eigen::Ref<const Batch>& dPsi) const {
  if (identity()) return dPsi;
  require(A.rows() == dPsi.cols(), "feature map: gradient shape mismatch");
  return dPsi * A;
}

VelocityReport fav_velocity(const Eigen::Ref<const Batch>& gen_x,
                            const Eigen::Ref<const Batch>& ref,
                            const RewardOracle& reward, const FavConfig& cfg,
                            double* sigma_out) {
  require(gen_x.rows() >= 1 && ref.rows() >= 1, "transport: empty batch");
  require(gen_x.cols() == ref.cols(), "transport: dimension mismatch");
  Batch P = cfg.psi.apply(gen_x);
  Batch R = cfg.psi.apply(ref);
  const double sigma = cfg.adaptive_bandwidth
                           ? scott_bandwidth(R, cfg.n_gen)
                           : sigma_from_tau(cfg.tau);
  if (sigma_out) *sigma_out = sigma;
  Batch g = cfg.terms.reward ? oracle_grad_rows(reward, P)
                             : Batch(Batch::Zero(P.rows(), P.cols()));
  return stein_velocity_kde(P, P, R, sigma, g, cfg.beta, cfg.terms);
}

double fav_eval_loss(const Eigen::Ref<const Batch>& gen_x,
                     const Eigen::Ref<const Batch>& ref,
                     const RewardOracle& reward, const FavConfig& cfg) {
  VelocityReport rep = fav_velocity(gen_x, ref, reward, cfg);
  return rep.total.rowwise().squaredNorm().mean();
}

FavStepStats fav_train_step(GeneratorHandle& gen,
                            const Eigen::Ref<const Batch>& ref,
                            const RewardOracle& reward, const FavConfig& cfg,
                            const OptConfig& ocfg, OptState& opt,
                            RngStream& rng) {
  require(gen.params != nullptr, "fav step: generator has no parameters");
  require(static_cast<bool>(gen.sample_graph), "fav step: generator cannot sample");
  require(cfg.n_gen >= 1, "fav step: empty generated batch");

  SampleGraph graph = gen.sample_graph(cfg.n_gen, rng);
  require(graph.x.rows() == cfg.n_gen, "fav step: generator returned wrong count");
  require(static_cast<bool>(graph.backward), "fav step: generator is not differentiable");

  FavStepStats stats;
  double sigma = 0.0;
  VelocityReport rep = fav_velocity(graph.x, ref, reward, cfg, &sigma);
  stats.sigma = sigma;
  stats.far_from_support = rep.far_from_support;
  stats.loss = rep.total.rowwise().squaredNorm().mean();

  // Regression of x onto stopgrad(x + phi(x)): the velocity is a constant
  // target, so dL/d\psi = -(2/n) phi, pulled back through the feature map.
  const double scale = -2.0 / static_cast<double>(cfg.n_gen);
  Batch dPsi = scale * rep.total;
  Batch dX = cfg.psi.pullback(dPsi);
  GradBundle g = graph.backward(dX);
  stats.grad_norm = opt_step(opt, ocfg, {gen.params}, {&g});
  return stats;
}

}  // namespace fav
