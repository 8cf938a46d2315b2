#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "colorcaps/tensor.hpp"

namespace colorcaps {

using ScalarFn = std::function<double(const std::vector<TensorD>&)>;

// Central finite differences, step 1e-3, evaluated entirely in 64-bit.
inline std::vector<TensorD> finite_difference_grads(const ScalarFn& f,
                                                    std::vector<TensorD> point,
                                                    double step = 1e-3) {
  std::vector<TensorD> grads;
  grads.reserve(point.size());
  for (const TensorD& p : point) grads.push_back(TensorD::zeros(p.shape));

  for (std::size_t t = 0; t < point.size(); ++t) {
    for (std::size_t i = 0; i < point[t].numel(); ++i) {
      const double saved = point[t].data[i];
      point[t].data[i] = saved + step;
      const double fp = f(point);
      point[t].data[i] = saved - step;
      const double fm = f(point);
      point[t].data[i] = saved;
      grads[t].data[i] = (fp - fm) / (2.0 * step);
    }
  }
  return grads;
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Worst relative error between the analytic gradient and central differences,
// over all coordinates of all tensors.
inline double gradcheck(const ScalarFn& f, const std::vector<TensorD>& point,
                        const std::vector<TensorD>& analytic, double step = 1e-3) {
  if (analytic.size() != point.size()) {
    throw shape_error("gradcheck: analytic gradient count mismatch");
  }
  const std::vector<TensorD> numeric = finite_difference_grads(f, point, step);
  double worst = 0.0;
  for (std::size_t t = 0; t < point.size(); ++t) {
    require_shape(analytic[t], point[t].shape, "gradcheck analytic gradient");
    for (std::size_t i = 0; i < point[t].numel(); ++i) {
      worst = std::max(worst, relative_error(analytic[t].data[i], numeric[t].data[i]));
    }
  }
  return worst;
}

}  // namespace colorcaps
