#pragma once

#include "fav/types.hpp"

namespace fav {

// Row-wise log-sum-exp with the usual max shift. Each row needs at least one
// finite entry; -inf logits are allowed and drop out.
Vec rowwise_lse(const Eigen::Ref<const Matrix>& logits);

// Row-wise softmax sharing the same stability shift.
Matrix rowwise_softmax(const Eigen::Ref<const Matrix>& logits);

}  // namespace fav
