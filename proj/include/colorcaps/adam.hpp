#pragma once

#include <cmath>
#include <cstdint>

#include "colorcaps/tensor.hpp"

namespace colorcaps {

template <typename T>
struct AdamState {
  Tensor<T> m;
  Tensor<T> v;
  std::int64_t t = 0;  // completed steps
  T lr = static_cast<T>(1e-3);
  T beta1 = static_cast<T>(0.9);
  T beta2 = static_cast<T>(0.999);
  T eps = static_cast<T>(1e-8);

  static AdamState init(const Shape& param_shape, T lr = static_cast<T>(1e-3),
                        T beta1 = static_cast<T>(0.9), T beta2 = static_cast<T>(0.999),
                        T eps = static_cast<T>(1e-8)) {
    AdamState s;
    s.m = Tensor<T>::zeros(param_shape);
    s.v = Tensor<T>::zeros(param_shape);
    s.lr = lr;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    return s;
  }
};

template <typename T>
struct AdamResult {
  Tensor<T> param;
  AdamState<T> state;
};

// One bias-corrected Adam update. Pure: returns the new parameter and state.
template <typename T>
AdamResult<T> adam_step(const Tensor<T>& param, const Tensor<T>& grad,
                        const AdamState<T>& state) {
  require_shape(grad, param.shape, "adam grad");
  require_shape(state.m, param.shape, "adam moment m");
  require_shape(state.v, param.shape, "adam moment v");

  AdamResult<T> r{param, state};
  r.state.t = state.t + 1;
  const T b1 = state.beta1, b2 = state.beta2;
  const T corr1 = T(1) - std::pow(b1, static_cast<T>(r.state.t));
  const T corr2 = T(1) - std::pow(b2, static_cast<T>(r.state.t));
  for (std::size_t i = 0; i < param.numel(); ++i) {
    const T g = grad.data[i];
    const T m = b1 * state.m.data[i] + (T(1) - b1) * g;
    const T v = b2 * state.v.data[i] + (T(1) - b2) * g * g;
    r.state.m.data[i] = m;
    r.state.v.data[i] = v;
    const T mhat = m / corr1;
    const T vhat = v / corr2;
    r.param.data[i] = param.data[i] - state.lr * mhat / (std::sqrt(vhat) + state.eps);
  }
  return r;
}

}  // namespace colorcaps
