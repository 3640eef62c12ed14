#include <cmath>
#include <limits>

#include "fav/kernels.hpp"
#include "fav/mixture.hpp"
#include "fav/reduce.hpp"
#include "fav/reward.hpp"
#include "fav/tilted.hpp"

namespace fav {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_mixture(const GaussianMixture& m) {
  require(m.centers.rows() >= 1, "mixture needs at least one component");
  require(m.weights.size() == m.centers.rows(),
          "mixture weights/centers size mismatch");
  require(m.std_dev > 0.0, "mixture std must be positive");
  require((m.weights.array() > 0.0).all(), "mixture weights must be positive");
}

// Component logits log w_k - ||x - c_k||^2 / (2 s^2), one row per sample.
Matrix component_logits(const GaussianMixture& m,
                        const Eigen::Ref<const Batch>& X) {
  const double inv2s2 = 1.0 / (2.0 * m.std_dev * m.std_dev);
  Matrix logits = -inv2s2 * pairwise_sqdist(X, m.centers);
  logits.rowwise() += m.weights.array().log().matrix().transpose();
  return logits;
}

}  // namespace

GaussianMixture eight_gaussians() {
  const Index k = 8;
  const double scale = 1.0 / std::sqrt(2.0);
  GaussianMixture m;
  m.centers.resize(k, 2);
  for (Index i = 0; i < k; ++i) {
    const double ang = 2.0 * M_PI * static_cast<double>(i) / static_cast<double>(k);
    m.centers(i, 0) = 4.0 * scale * std::cos(ang);
    m.centers(i, 1) = 4.0 * scale * std::sin(ang);
  }
  m.weights = Vec::Constant(k, 1.0 / static_cast<double>(k));
  m.std_dev = 0.5 * scale;
  return m;
}

Vec mixture_logpdf_rows(const GaussianMixture& m,
                        const Eigen::Ref<const Batch>& X) {
  check_mixture(m);
  require(X.cols() == m.dim(), "mixture logpdf: dimension mismatch");
  const double d = static_cast<double>(m.dim());
  const double norm = -0.5 * d * std::log(2.0 * M_PI * m.std_dev * m.std_dev);
  return rowwise_lse(component_logits(m, X)).array() + norm;
}

Batch mixture_score_rows(const GaussianMixture& m,
                         const Eigen::Ref<const Batch>& X) {
  check_mixture(m);
  require(X.cols() == m.dim(), "mixture score: dimension mismatch");
  // grad log p = sum_k resp_k (c_k - x) / s^2 with resp the posterior over
  // components.
  Matrix resp = rowwise_softmax(component_logits(m, X));
  return (resp * m.centers - X) / (m.std_dev * m.std_dev);
}

double mixture_logpdf(const GaussianMixture& m, const Eigen::Ref<const Vec>& x) {
  return mixture_logpdf_rows(m, x.transpose())(0);
}

Vec mixture_score(const GaussianMixture& m, const Eigen::Ref<const Vec>& x) {
  return mixture_score_rows(m, x.transpose()).row(0).transpose();
}

Batch mixture_sample(const GaussianMixture& m, Index n, RngStream& rng) {
  check_mixture(m);
  require(n >= 0, "mixture sample: negative count");
  Vec cum(m.n_components());
  double acc = 0.0;
  for (Index k = 0; k < m.n_components(); ++k) {
    acc += m.weights(k);
    cum(k) = acc;
  }
  Batch out(n, m.dim());
  // Per sample: one uniform for the component, then dim normals. This order
  // is part of the reproducibility contract.
  for (Index i = 0; i < n; ++i) {
    const double u = rng.uniform() * acc;
    Index k = 0;
    while (k + 1 < m.n_components() && u >= cum(k)) ++k;
    for (Index j = 0; j < m.dim(); ++j)
      out(i, j) = m.centers(k, j) + m.std_dev * rng.normal();
  }
  return out;
}

GaussianMixture smoothed_mixture(const GaussianMixture& m, double sigma) {
  check_mixture(m);
  require(sigma >= 0.0, "smoothing width must be non-negative");
  GaussianMixture out = m;
  out.std_dev = std::sqrt(m.std_dev * m.std_dev + sigma * sigma);
  return out;
}

Eigen::VectorXi nearest_center(const Eigen::Ref<const Batch>& X,
                               const Eigen::Ref<const Batch>& centers) {
  require(X.cols() == centers.cols(), "nearest_center: dimension mismatch");
  require(centers.rows() >= 1, "nearest_center: no centers");
  Matrix d2 = pairwise_sqdist(X, centers);
  Eigen::VectorXi idx(X.rows());
  for (Index i = 0; i < X.rows(); ++i) {
    Index best = 0;
    d2.row(i).minCoeff(&best);
    idx(i) = static_cast<int>(best);
  }
  return idx;
}

// ---------------------------------------------------------------------------
// Soft cluster reward
// ---------------------------------------------------------------------------

namespace {

void check_reward(const SoftClusterReward& r) {
  require(r.centers.rows() >= 2, "soft cluster reward needs >= 2 centers");
}

// Negative squared distances, the softmax logits of the reward.
Matrix reward_logits(const SoftClusterReward& r,
                     const Eigen::Ref<const Batch>& X) {
  return -pairwise_sqdist(X, r.centers);
}

// log level_k, with level_0 = 0 mapped to -inf so it drops out of the
// numerator log-sum-exp.
Vec log_levels(const SoftClusterReward& r) {
  Vec ll(r.n_components());
  ll(0) = kNegInf;
  for (Index k = 1; k < r.n_components(); ++k) ll(k) = std::log(r.level(k));
  return ll;
}

}  // namespace

Vec reward_value_rows(const SoftClusterReward& r,
                      const Eigen::Ref<const Batch>& X) {
  check_reward(r);
  require(X.cols() == r.centers.cols(), "reward: dimension mismatch");
  // r(x) = log sum_k softmax(z)_k level_k
  //      = lse(z + log level) - lse(z), all in log space.
  Matrix z = reward_logits(r, X);
  Matrix zl = z;
  zl.rowwise() += log_levels(r).transpose();
  return rowwise_lse(zl) - rowwise_lse(z);
}

Batch reward_grad_rows(const SoftClusterReward& r,
                       const Eigen::Ref<const Batch>& X) {
  check_reward(r);
  require(X.cols() == r.centers.cols(), "reward: dimension mismatch");
  // With z_k = -||x - c_k||^2, grad z_k = 2 (c_k - x); the x parts cancel
  // between the two softmax expectations, leaving
  //   grad r = 2 (E_p[c] - E_s[c]),
  // p = softmax(z + log level), s = softmax(z).
  Matrix z = reward_logits(r, X);
  Matrix zl = z;
  zl.rowwise() += log_levels(r).transpose();
  Matrix p = rowwise_softmax(zl);
  Matrix s = rowwise_softmax(z);
  return 2.0 * ((p - s) * r.centers);
}

double reward_value(const SoftClusterReward& r, const Eigen::Ref<const Vec>& x) {
  return reward_value_rows(r, x.transpose())(0);
}

Vec reward_grad(const SoftClusterReward& r, const Eigen::Ref<const Vec>& x) {
  return reward_grad_rows(r, x.transpose()).row(0).transpose();
}

Batch oracle_grad_rows(const RewardOracle& o, const Eigen::Ref<const Batch>& X) {
  if (o.grad_rows) return o.grad_rows(X);
  require(static_cast<bool>(o.grad), "reward oracle has no gradient");
  Batch g(X.rows(), X.cols());
  for (Index i = 0; i < X.rows(); ++i)
    g.row(i) = o.grad(X.row(i).transpose()).transpose();
  return g;
}

RewardOracle make_oracle(const SoftClusterReward& r) {
  check_reward(r);
  RewardOracle o;
  o.value = [r](const Eigen::Ref<const Vec>& x) { return reward_value(r, x); };
  o.grad = [r](const Eigen::Ref<const Vec>& x) { return reward_grad(r, x); };
  o.grad_rows = [r](const Eigen::Ref<const Batch>& X) {
    return reward_grad_rows(r, X);
  };
  return o;
}

RewardOracle constant_reward(double c) {
  RewardOracle o;
  o.value = [c](const Eigen::Ref<const Vec>&) { return c; };
  o.grad = [](const Eigen::Ref<const Vec>& x) {
    return Vec(Vec::Zero(x.size()));
  };
  o.grad_rows = [](const Eigen::Ref<const Batch>& X) {
    return Batch(Batch::Zero(X.rows(), X.cols()));
  };
  return o;
}

// ---------------------------------------------------------------------------
// Tilted target
// ---------------------------------------------------------------------------

TiltedTarget make_tilted(const GaussianMixture& base, const SoftClusterReward& r,
                         double beta, GridBox box) {
  check_mixture(base);
  require(std::isfinite(beta), "tilt strength must be finite");
  TiltedTarget t;
  t.base = base;
  t.reward = make_oracle(r);
  t.beta = beta;
  t.box = box;
  return t;
}

double tilted_logpdf(const TiltedTarget& t, const Eigen::Ref<const Vec>& x,
                     bool normalized) {
  require(static_cast<bool>(t.reward.value), "tilted target has no reward");
  double lp = mixture_logpdf(t.base, x) + t.beta * t.reward.value(x);
  if (normalized) lp -= tilted_log_z(t);
  return lp;
}

namespace {

// Unnormalized tilted log density on every cell of the box, as a res x res
// matrix indexed (x cell, y cell). Batched over the whole grid.
Matrix tilted_grid_logpdf(const TiltedTarget& t) {
  require(t.base.dim() == 2, "grid evaluation is 2-D only");
  const Index res = t.box.res;
  Batch pts(res * res, 2);
  for (Index i = 0; i < res; ++i)
    for (Index j = 0; j < res; ++j) {
      pts(i * res + j, 0) = t.box.coord(i);
      pts(i * res + j, 1) = t.box.coord(j);
    }
  Vec lp = mixture_logpdf_rows(t.base, pts);
  if (t.beta != 0.0) {
    for (Index r = 0; r < pts.rows(); ++r)
      lp(r) += t.beta * t.reward.value(pts.row(r).transpose());
  }
  check_finite(lp, "tilted grid log density");
  Matrix out(res, res);
  for (Index i = 0; i < res; ++i)
    for (Index j = 0; j < res; ++j) out(i, j) = lp(i * res + j);
  return out;
}

}  // namespace

double tilted_log_z(const TiltedTarget& t) {
  if (!t.log_z_cache) {
    Matrix vals = tilted_grid_logpdf(t).array().exp().matrix();
    t.log_z_cache = std::log(grid_integral(t.box, vals));
  }
  return *t.log_z_cache;
}

Matrix tilted_density_grid(const TiltedTarget& t) {
  return (tilted_grid_logpdf(t).array() - tilted_log_z(t)).exp().matrix();
}

Batch tilted_sample_rejection(const TiltedTarget& t, Index n, RngStream& rng,
                              double* acceptance_rate) {
  require(t.beta >= 0.0, "rejection sampling needs beta >= 0");
  require(static_cast<bool>(t.reward.value), "tilted target has no reward");
  check_mixture(t.base);
  const GaussianMixture& m = t.base;
  Vec cum(m.n_components());
  double acc = 0.0;
  for (Index k = 0; k < m.n_components(); ++k) {
    acc += m.weights(k);
    cum(k) = acc;
  }
  Batch out(n, m.dim());
  Vec x(m.dim());
  int64_t proposals = 0;
  for (Index i = 0; i < n;) {
    const double u = rng.uniform() * acc;
    Index k = 0;
    while (k + 1 < m.n_components() && u >= cum(k)) ++k;
    for (Index j = 0; j < m.dim(); ++j)
      x(j) = m.centers(k, j) + m.std_dev * rng.normal();
    ++proposals;
    const double a = std::exp(t.beta * t.reward.value(x));
    if (a > 1.0 + 1e-12)
      throw std::runtime_error(
          "rejection envelope violated: exp(beta * r) above 1");
    if (rng.uniform() < a) {
      out.row(i) = x.transpose();
      ++i;
    }
  }
  if (acceptance_rate)
    *acceptance_rate = static_cast<double>(n) / static_cast<double>(proposals);
  return out;
}

Vec tilted_mode_masses(const TiltedTarget& t) {
  Matrix dens = tilted_density_grid(t);
  const Index res = t.box.res;
  Batch pts(res * res, 2);
  for (Index i = 0; i < res; ++i)
    for (Index j = 0; j < res; ++j) {
      pts(i * res + j, 0) = t.box.coord(i);
      pts(i * res + j, 1) = t.box.coord(j);
    }
  Eigen::VectorXi idx = nearest_center(pts, t.base.centers);
  Vec mass = Vec::Zero(t.base.n_components());
  const double cell2 = t.box.cell() * t.box.cell();
  for (Index i = 0; i < res; ++i)
    for (Index j = 0; j < res; ++j)
      mass(idx(i * res + j)) += dens(i, j) * cell2;
  return mass;
}

}  // namespace fav
