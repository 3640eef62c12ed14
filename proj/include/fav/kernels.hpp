#pragma once

#include "fav/types.hpp"

namespace fav {

// Smoothing kernels. gaussian_rbf: k(x,y) = exp(-||x-y||^2 / tau) with the
// tau = 2*sigma^2 convention used throughout; laplacian: exp(-||x-y|| / tau).
enum class KernelFamily { gaussian_rbf, laplacian };

struct KernelSpec {
  KernelFamily family = KernelFamily::gaussian_rbf;
  double tau = 0.5;
};

inline double sigma_from_tau(double tau) { return std::sqrt(tau / 2.0); }
inline double tau_from_sigma(double sigma) { return 2.0 * sigma * sigma; }

double kernel_eval(const KernelSpec& k, const Eigen::Ref<const Vec>& x,
                   const Eigen::Ref<const Vec>& y);

// d/dx k(x, y). Gaussian only: k * (y - x) * (2/tau), i.e. k * (y - x)/sigma^2.
// The laplacian kernel has no gradient at x == y, and nothing here needs one.
Vec kernel_grad_x(const KernelSpec& k, const Eigen::Ref<const Vec>& x,
                  const Eigen::Ref<const Vec>& y);

// Pairwise squared distances, D(i,j) = ||A.row(i) - B.row(j)||^2, clamped at 0
// against cancellation in the Gram expansion.
Matrix pairwise_sqdist(const Eigen::Ref<const Batch>& A,
                       const Eigen::Ref<const Batch>& B);

// K(i,j) = k(A.row(i), B.row(j)).
Matrix kernel_matrix(const KernelSpec& k, const Eigen::Ref<const Batch>& A,
                     const Eigen::Ref<const Batch>& B);

}  // namespace fav
