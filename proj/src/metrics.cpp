#include "fav/metrics.hpp"

#include <cmath>
#include <limits>

#include "fav/bandwidth.hpp"
#include "fav/mixture.hpp"
#include "fav/reduce.hpp"

namespace fav {

namespace {

constexpr Index kChunk = 512;

// Leave-one-out Gaussian-KDE log density of each sample under the rest.
Vec loo_kde_logdensity(const Eigen::Ref<const Batch>& x, double h) {
  const Index n = x.rows();
  const Index d = x.cols();
  const double inv = 1.0 / (2.0 * h * h);
  const double log_norm = std::log(static_cast<double>(n - 1)) +
                          0.5 * d * std::log(2.0 * M_PI * h * h);
  Vec norms = x.rowwise().squaredNorm();
  Vec out(n);
  for (Index r0 = 0; r0 < n; r0 += kChunk) {
    const Index len = std::min(kChunk, n - r0);
    Matrix d2 = ((-2.0 * x.middleRows(r0, len) * x.transpose()).colwise() +
                 norms.segment(r0, len))
                    .rowwise() +
                norms.transpose();
    Matrix logits = (-inv) * d2.cwiseMax(0.0);
    for (Index i = 0; i < len; ++i)
      logits(i, r0 + i) = -std::numeric_limits<double>::infinity();
    out.segment(r0, len) = rowwise_lse(logits).array() - log_norm;
  }
  return out;
}

// Separable Gaussian blur of a cell-center density grid; taps outside the
// grid are dropped and the remaining weights renormalized, so the blur maps
// densities to densities up to boundary truncation.
Matrix blur_density_grid(const GridBox& box, const Eigen::Ref<const Matrix>& g,
                         double h) {
  const int res = box.res;
  const double step = box.cell();
  const int radius = std::min<int>(res - 1, static_cast<int>(std::ceil(4.0 * h / step)));
  Vec w(2 * radius + 1);
  for (int k = -radius; k <= radius; ++k)
    w(k + radius) = std::exp(-0.5 * (k * step) * (k * step) / (h * h));

  Vec wsum = Vec::Zero(res);
  for (int i = 0; i < res; ++i)
    for (int k = -radius; k <= radius; ++k)
      if (i + k >= 0 && i + k < res) wsum(i) += w(k + radius);

  Matrix a = Matrix::Zero(res, res);  // blur over rows (x index)
  for (int k = -radius; k <= radius; ++k) {
    const int lo = std::max(0, -k);
    const int hi = std::min(res, res - k);
    a.middleRows(lo, hi - lo) += w(k + radius) * g.middleRows(lo + k, hi - lo);
  }
  a.array().colwise() /= wsum.array();

  Matrix b = Matrix::Zero(res, res);  // blur over columns (y index)
  for (int k = -radius; k <= radius; ++k) {
    const int lo = std::max(0, -k);
    const int hi = std::min(res, res - k);
    b.middleCols(lo, hi - lo) += w(k + radius) * a.middleCols(lo + k, hi - lo);
  }
  b.array().rowwise() /= wsum.transpose().array();
  return b;
}

// Bilinear interpolation of a positive cell-center grid; returns a negative
// value when the query falls outside the box so callers can fall back.
double bilinear_density(const GridBox& box, const Eigen::Ref<const Matrix>& g,
                        double x, double y) {
  if (x < box.lo || x > box.hi || y < box.lo || y > box.hi) return -1.0;
  const double step = box.cell();
  auto axis = [&](double v, int& i0, double& f) {
    double u = (v - box.lo) / step - 0.5;
    u = std::min(std::max(u, 0.0), static_cast<double>(box.res - 1));
    i0 = std::min(static_cast<int>(u), box.res - 2);
    f = u - i0;
  };
  int ix, iy;
  double fx, fy;
  axis(x, ix, fx);
  axis(y, iy, fy);
  return (1 - fx) * ((1 - fy) * g(ix, iy) + fy * g(ix, iy + 1)) +
         fx * ((1 - fy) * g(ix + 1, iy) + fy * g(ix + 1, iy + 1));
}

double sum_within_offdiag(const KernelSpec& k, const Eigen::Ref<const Batch>& x) {
  double s = 0.0;
  for (Index r0 = 0; r0 < x.rows(); r0 += kChunk) {
    const Index len = std::min(kChunk, x.rows() - r0);
    Matrix K = kernel_matrix(k, x.middleRows(r0, len), x);
    for (Index i = 0; i < len; ++i) K(i, r0 + i) = 0.0;
    s += K.sum();
  }
  return s;
}

double sum_cross(const KernelSpec& k, const Eigen::Ref<const Batch>& a,
                 const Eigen::Ref<const Batch>& b) {
  double s = 0.0;
  for (Index r0 = 0; r0 < a.rows(); r0 += kChunk) {
    const Index len = std::min(kChunk, a.rows() - r0);
    s += kernel_matrix(k, a.middleRows(r0, len), b).sum();
  }
  return s;
}

// Column-major coefficient order; ties resolve to "not greater".
bool lex_greater(const Eigen::Ref<const Batch>& a,
                 const Eigen::Ref<const Batch>& b) {
  for (Index j = 0; j < a.cols(); ++j)
    for (Index i = 0; i < a.rows(); ++i) {
      if (a(i, j) > b(i, j)) return true;
      if (a(i, j) < b(i, j)) return false;
    }
  return false;
}

}  // namespace

double kl_to_target(const Eigen::Ref<const Batch>& samples,
                    const TiltedTarget& target) {
  require(samples.rows() >= 1000, "kl_to_target: need at least 1000 samples");
  require(samples.cols() == target.base.dim(),
          "kl_to_target: dimension mismatch with target");
  const Index n = samples.rows();
  const double h = scott_bandwidth(samples);

  Vec log_q = loo_kde_logdensity(samples, h);
  Matrix grid = blur_density_grid(target.box, tilted_density_grid(target), h);

  double acc = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double dens =
        bilinear_density(target.box, grid, samples(i, 0), samples(i, 1));
    const double log_p = dens > 1e-300
                             ? std::log(dens)
                             : tilted_logpdf(target, samples.row(i).transpose());
    acc += log_q(i) - log_p;
  }
  const double kl = acc / static_cast<double>(n);
  check_finite(Vec::Constant(1, kl), "kl_to_target");
  return kl;
}

double mmd(const Eigen::Ref<const Batch>& a, const Eigen::Ref<const Batch>& b,
           const KernelSpec& kernel) {
  require(a.rows() >= 2 && b.rows() >= 2,
          "mmd: unbiased within-set terms need at least 2 rows per set");
  require(a.cols() == b.cols(), "mmd: dimension mismatch");
  // Canonical orientation so the cross sum visits pairs in the same order for
  // mmd(a,b) and mmd(b,a), making the result bitwise symmetric.
  const bool swap =
      a.rows() > b.rows() || (a.rows() == b.rows() && lex_greater(a, b));
  const Eigen::Ref<const Batch>& p = swap ? b : a;
  const Eigen::Ref<const Batch>& q = swap ? a : b;
  const double m = static_cast<double>(p.rows());
  const double n = static_cast<double>(q.rows());
  const double within_p = sum_within_offdiag(kernel, p) / (m * (m - 1.0));
  const double within_q = sum_within_offdiag(kernel, q) / (n * (n - 1.0));
  return within_p + within_q - 2.0 * sum_cross(kernel, p, q) / (m * n);
}

double energy_distance(const Eigen::Ref<const Batch>& a,
                       const Eigen::Ref<const Batch>& b) {
  require(a.rows() >= 2 && b.rows() >= 2,
          "energy_distance: need at least 2 rows per set");
  require(a.cols() == b.cols(), "energy_distance: dimension mismatch");
  auto within = [](const Eigen::Ref<const Batch>& x) {
    double s = 0.0;
    for (Index i = 0; i < x.rows(); ++i)
      s += (x.bottomRows(x.rows() - 1 - i).rowwise() - x.row(i))
               .rowwise()
               .norm()
               .sum();
    const double m = static_cast<double>(x.rows());
    return 2.0 * s / (m * (m - 1.0));
  };
  double cross = 0.0;
  for (Index i = 0; i < a.rows(); ++i)
    cross += (b.rowwise() - a.row(i)).rowwise().norm().sum();
  cross /= static_cast<double>(a.rows()) * static_cast<double>(b.rows());
  return 2.0 * cross - within(a) - within(b);
}

Vec mode_masses(const Eigen::Ref<const Batch>& samples,
                const Eigen::Ref<const Batch>& centers) {
  require(samples.rows() >= 1, "mode_masses: empty sample set");
  Eigen::VectorXi idx = nearest_center(samples, centers);
  Vec mass = Vec::Zero(centers.rows());
  for (Index i = 0; i < idx.size(); ++i) mass(idx(i)) += 1.0;
  return mass / static_cast<double>(samples.rows());
}

double mean_reward(const Eigen::Ref<const Batch>& samples,
                   const RewardOracle& reward) {
  require(samples.rows() >= 1, "mean_reward: empty sample set");
  double s = 0.0;
  for (Index i = 0; i < samples.rows(); ++i)
    s += reward.value(samples.row(i).transpose());
  return s / static_cast<double>(samples.rows());
}

}  // namespace fav
