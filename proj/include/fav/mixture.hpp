#pragma once

#include "fav/rng.hpp"
#include "fav/types.hpp"

namespace fav {

// Isotropic Gaussian mixture with one shared std, rows of `centers` are the
// component means.
struct GaussianMixture {
  Batch centers;  // K x d
  Vec weights;    // K, sums to 1
  double std_dev = 1.0;

  Index n_components() const { return centers.rows(); }
  Index dim() const { return centers.cols(); }
};

// The 2-D eight-Gaussians benchmark: equal weights, centers on a circle of
// radius 4 with std 0.5, then the whole plane rescaled by 1/sqrt(2).
GaussianMixture eight_gaussians();

double mixture_logpdf(const GaussianMixture& m, const Eigen::Ref<const Vec>& x);
Vec mixture_score(const GaussianMixture& m, const Eigen::Ref<const Vec>& x);

Vec mixture_logpdf_rows(const GaussianMixture& m, const Eigen::Ref<const Batch>& X);
Batch mixture_score_rows(const GaussianMixture& m, const Eigen::Ref<const Batch>& X);

Batch mixture_sample(const GaussianMixture& m, Index n, RngStream& rng);

// Convolution with an isotropic Gaussian of width sigma: same mixture with
// std' = sqrt(std^2 + sigma^2).
GaussianMixture smoothed_mixture(const GaussianMixture& m, double sigma);

// Index of the nearest center per row (mode assignment).
Eigen::VectorXi nearest_center(const Eigen::Ref<const Batch>& X,
                               const Eigen::Ref<const Batch>& centers);

}  // namespace fav
