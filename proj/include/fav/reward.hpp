#pragma once

#include <functional>

#include "fav/types.hpp"

namespace fav {

// Soft cluster-preference reward over a set of centers c_0..c_{K-1}:
//
//   exp(r(x)) = sum_k softmax_k(-||x - c_k||^2) * (k / (K-1))
//
// so r is highest near the last center and lowest near the first. Evaluated
// in log space throughout; far from all centers the softmax saturates onto
// the nearest center and r stays finite unless that center is c_0.
struct SoftClusterReward {
  Batch centers;  // K x d, K >= 2

  Index n_components() const { return centers.rows(); }
  double level(Index k) const {
    return static_cast<double>(k) / static_cast<double>(centers.rows() - 1);
  }
};

double reward_value(const SoftClusterReward& r, const Eigen::Ref<const Vec>& x);
Vec reward_grad(const SoftClusterReward& r, const Eigen::Ref<const Vec>& x);

Vec reward_value_rows(const SoftClusterReward& r, const Eigen::Ref<const Batch>& X);
Batch reward_grad_rows(const SoftClusterReward& r, const Eigen::Ref<const Batch>& X);

// Type-erased reward interface used by the tilted target and the transport
// velocity. `grad` may be empty when only values are available (a derivative
// estimator is plugged in instead); `grad_rows` is an optional batched path
// the hot loops prefer when present.
struct RewardOracle {
  std::function<double(const Eigen::Ref<const Vec>&)> value;
  std::function<Vec(const Eigen::Ref<const Vec>&)> grad;
  std::function<Batch(const Eigen::Ref<const Batch>&)> grad_rows;
};

// Gradient of the oracle at each row, via grad_rows when available and a
// row-by-row fallback otherwise.
Batch oracle_grad_rows(const RewardOracle& o, const Eigen::Ref<const Batch>& X);

RewardOracle make_oracle(const SoftClusterReward& r);
RewardOracle constant_reward(double c);

}  // namespace fav
