#pragma once

#include "fav/types.hpp"

namespace fav {

// Scott's rule kernel width: h = n^{-1/(d+4)} * sigma_bar, where sigma_bar is
// the per-dimension population std (ddof = 0) averaged over dimensions. The
// two-argument form lets `n` differ from the number of rows supplying the
// spread estimate: the adaptive-bandwidth schedule plugs in the training
// batch size there, not the reference-set size.
double scott_bandwidth(const Eigen::Ref<const Batch>& X, Index n);
double scott_bandwidth(const Eigen::Ref<const Batch>& X);

}  // namespace fav
