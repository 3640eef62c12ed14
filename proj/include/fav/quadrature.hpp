#pragma once

#include <functional>

#include "fav/types.hpp"

namespace fav {

// Square box with a res x res midpoint grid; the workhorse for normalizing
// constants, mode masses and density smoothing on the 2-D toys.
struct GridBox {
  double lo = -6.0;
  double hi = 6.0;
  int res = 512;

  double cell() const { return (hi - lo) / res; }
  double coord(int i) const { return lo + (i + 0.5) * cell(); }  // cell center
};

// f evaluated at cell centers; vals(i, j) = f(x_i, y_j).
Matrix grid_eval(const GridBox& box, const std::function<double(double, double)>& f);

// Midpoint-rule integral of tabulated cell-center values.
double grid_integral(const GridBox& box, const Eigen::Ref<const Matrix>& vals);

// Midpoint-rule integral of f over the box. Throws on non-finite values and
// on res < 64 (too coarse for anything this is used for).
double grid_quadrature_2d(const GridBox& box,
                          const std::function<double(double, double)>& f);

}  // namespace fav
