#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace fav {

// Everything runs in float64. Rows of a Batch are samples, columns are dims.
using Scalar = double;
using Vec = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Batch = Eigen::MatrixXd;
using Index = Eigen::Index;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void check_finite(double v, const char* what) {
  if (!std::isfinite(v))
    throw std::runtime_error(std::string("non-finite value in ") + what);
}

inline void check_finite(const Eigen::Ref<const Matrix>& m, const char* what) {
  if (!m.allFinite())
    throw std::runtime_error(std::string("non-finite value in ") + what);
}

}  // namespace fav
