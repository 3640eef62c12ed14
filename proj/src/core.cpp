#include <cmath>
#include <numbers>

#include "fav/kernels.hpp"
#include "fav/quadrature.hpp"
#include "fav/reduce.hpp"
#include "fav/rng.hpp"

namespace fav {

// ---------------------------------------------------------------------------
// RngStream

namespace {

constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ull;

inline uint64_t mix64(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline uint64_t hash_label(std::string_view s) {
  // FNV-1a, good enough to derive stream keys from names.
  uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

inline double u64_to_unit(uint64_t u) {
  return static_cast<double>(u >> 11) * 0x1.0p-53;  // [0, 1)
}

}  // namespace

RngStream RngStream::split(uint64_t key) const {
  return RngStream(mix64(seed_ ^ mix64(key + kGamma)));
}

RngStream RngStream::split(std::string_view label) const {
  return split(hash_label(label));
}

uint64_t RngStream::next_u64() { return mix64(seed_ + (++ctr_) * kGamma); }

double RngStream::uniform() { return u64_to_unit(next_u64()); }

double RngStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double t = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(t);
  has_spare_ = true;
  return r * std::cos(t);
}

Index RngStream::uniform_index(Index n) {
  require(n > 0, "uniform_index: n must be positive");
  Index i = static_cast<Index>(uniform() * static_cast<double>(n));
  return i < n ? i : n - 1;
}

void RngStream::fill_normal(Eigen::Ref<Matrix> out) {
  const Index n = out.size();
  if (n == 0) return;
  const Index pairs = (n + 1) / 2;
  // Vectorized Box-Muller over the flat (column-major) buffer.
  Eigen::ArrayXd u1(pairs), u2(pairs);
  for (Index i = 0; i < pairs; ++i) u1[i] = 1.0 - uniform();
  for (Index i = 0; i < pairs; ++i) u2[i] = uniform();
  Eigen::ArrayXd r = (-2.0 * u1.log()).sqrt();
  Eigen::ArrayXd t = (2.0 * std::numbers::pi) * u2;
  Eigen::ArrayXd a = r * t.cos();
  Eigen::ArrayXd b = r * t.sin();
  double* p = out.data();
  for (Index i = 0; i < pairs; ++i) {
    p[2 * i] = a[i];
    if (2 * i + 1 < n) p[2 * i + 1] = b[i];
  }
}

Matrix RngStream::normal_mat(Index rows, Index cols) {
  Matrix m(rows, cols);
  fill_normal(m);
  return m;
}

Vec RngStream::normal_vec(Index n) {
  Matrix m(n, 1);
  fill_normal(m);
  return m.col(0);
}

// ---------------------------------------------------------------------------
// Kernels

double kernel_eval(const KernelSpec& k, const Eigen::Ref<const Vec>& x,
                   const Eigen::Ref<const Vec>& y) {
  require(k.tau > 0.0, "kernel_eval: tau must be positive");
  require(x.size() == y.size(), "kernel_eval: dim mismatch");
  const double d2 = (x - y).squaredNorm();
  switch (k.family) {
    case KernelFamily::gaussian_rbf:
      return std::exp(-d2 / k.tau);
    case KernelFamily::laplacian:
      return std::exp(-std::sqrt(d2) / k.tau);
  }
  throw std::logic_error("kernel_eval: bad family");
}

Vec kernel_grad_x(const KernelSpec& k, const Eigen::Ref<const Vec>& x,
                  const Eigen::Ref<const Vec>& y) {
  require(k.family == KernelFamily::gaussian_rbf,
          "kernel_grad_x: only the gaussian-rbf kernel is differentiable here");
  const double kv = kernel_eval(k, x, y);
  return kv * (2.0 / k.tau) * (y - x);
}

Matrix pairwise_sqdist(const Eigen::Ref<const Batch>& A,
                       const Eigen::Ref<const Batch>& B) {
  require(A.cols() == B.cols(), "pairwise_sqdist: dim mismatch");
  const Vec a2 = A.rowwise().squaredNorm();
  const Vec b2 = B.rowwise().squaredNorm();
  Matrix D = (-2.0 * A * B.transpose());
  D.colwise() += a2;
  D.rowwise() += b2.transpose();
  return D.cwiseMax(0.0);
}

Matrix kernel_matrix(const KernelSpec& k, const Eigen::Ref<const Batch>& A,
                     const Eigen::Ref<const Batch>& B) {
  require(k.tau > 0.0, "kernel_matrix: tau must be positive");
  Matrix D = pairwise_sqdist(A, B);
  switch (k.family) {
    case KernelFamily::gaussian_rbf:
      return (-D / k.tau).array().exp();
    case KernelFamily::laplacian:
      return (-D.array().sqrt() / k.tau).exp();
  }
  throw std::logic_error("kernel_matrix: bad family");
}

// ---------------------------------------------------------------------------
// Quadrature

Matrix grid_eval(const GridBox& box, const std::function<double(double, double)>& f) {
  require(box.res >= 64, "grid_eval: resolution below 64 is too coarse");
  require(box.hi > box.lo, "grid_eval: empty box");
  Matrix vals(box.res, box.res);
  for (int i = 0; i < box.res; ++i) {
    const double x = box.coord(i);
    for (int j = 0; j < box.res; ++j) {
      const double v = f(x, box.coord(j));
      if (!std::isfinite(v))
        throw std::runtime_error("grid_eval: integrand returned a non-finite value");
      vals(i, j) = v;
    }
  }
  return vals;
}

double grid_integral(const GridBox& box, const Eigen::Ref<const Matrix>& vals) {
  const double cell = box.cell();
  // Fixed summation order: down columns, then across.
  double acc = 0.0;
  for (Index j = 0; j < vals.cols(); ++j)
    for (Index i = 0; i < vals.rows(); ++i) acc += vals(i, j);
  return acc * cell * cell;
}

double grid_quadrature_2d(const GridBox& box,
                          const std::function<double(double, double)>& f) {
  return grid_integral(box, grid_eval(box, f));
}


Vec rowwise_lse(const Eigen::Ref<const Matrix>& logits) {
  Vec m = logits.rowwise().maxCoeff();
  Vec out =
      ((logits.colwise() - m).array().exp().rowwise().sum()).log().matrix() + m;
  return out;
}

Matrix rowwise_softmax(const Eigen::Ref<const Matrix>& logits) {
  Vec m = logits.rowwise().maxCoeff();
  Matrix e = (logits.colwise() - m).array().exp().matrix();
  Vec z = e.rowwise().sum();
  return e.array().colwise() / z.array();
}

}  // namespace fav
