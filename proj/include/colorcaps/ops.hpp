#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "colorcaps/tensor.hpp"

namespace colorcaps {

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation), NCHW layout, zero padding.

struct ConvSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

inline std::size_t conv_out_extent(std::size_t in, const ConvSpec& spec) {
  const std::size_t padded = in + 2 * spec.padding;
  if (padded < spec.kernel) {
    throw shape_error("convolution kernel " + std::to_string(spec.kernel) +
                      " exceeds padded extent " + std::to_string(padded));
  }
  return (padded - spec.kernel) / spec.stride + 1;
}

template <typename T>
void check_conv_args(const Tensor<T>& input, const Tensor<T>& weights,
                     const Tensor<T>& bias, const ConvSpec& spec) {
  require_rank(input, 4, "conv2d input");
  require_shape(weights, {spec.out_channels, spec.in_channels, spec.kernel, spec.kernel},
                "conv2d weights");
  require_shape(bias, {spec.out_channels}, "conv2d bias");
  if (spec.kernel < 1 || spec.stride < 1) {
    throw shape_error("conv2d kernel and stride must be >= 1");
  }
  if (input.extent(1) != spec.in_channels) {
    throw shape_error("conv2d input has " + std::to_string(input.extent(1)) +
                      " channels, spec expects " + std::to_string(spec.in_channels));
  }
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weights,
                         const Tensor<T>& bias, const ConvSpec& spec) {
  check_conv_args(input, weights, bias, spec);
  const std::size_t N = input.extent(0), C = input.extent(1);
  const std::size_t H = input.extent(2), W = input.extent(3);
  const std::size_t F = spec.out_channels, K = spec.kernel;
  const std::size_t Ho = conv_out_extent(H, spec), Wo = conv_out_extent(W, spec);

  Tensor<T> out({N, F, Ho, Wo});
  const T* in = input.data.data();
  const T* w = weights.data.data();
  T* o = out.data.data();
  const long S = static_cast<long>(spec.stride), P = static_cast<long>(spec.padding);

  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t f = 0; f < F; ++f) {
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          T acc = bias.data[f];
          for (std::size_t c = 0; c < C; ++c) {
            const T* ip = in + ((n * C + c) * H) * W;
            const T* wp = w + ((f * C + c) * K) * K;
            for (std::size_t kh = 0; kh < K; ++kh) {
              const long ih = static_cast<long>(oh) * S + static_cast<long>(kh) - P;
              if (ih < 0 || ih >= static_cast<long>(H)) continue;
              for (std::size_t kw = 0; kw < K; ++kw) {
                const long iw = static_cast<long>(ow) * S + static_cast<long>(kw) - P;
                if (iw < 0 || iw >= static_cast<long>(W)) continue;
                acc += ip[ih * static_cast<long>(W) + iw] * wp[kh * K + kw];
              }
            }
          }
          o[((n * F + f) * Ho + oh) * Wo + ow] = acc;
        }
      }
    }
  }
  return out;
}

template <typename T>
struct Conv2dGrads {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

// Gradients of sum(grad_out * conv2d_forward(...)) w.r.t. input, weights, bias.
template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                               const Tensor<T>& weights, const ConvSpec& spec) {
  Tensor<T> bias_dummy({spec.out_channels});
  check_conv_args(input, weights, bias_dummy, spec);
  const std::size_t N = input.extent(0), C = input.extent(1);
  const std::size_t H = input.extent(2), W = input.extent(3);
  const std::size_t F = spec.out_channels, K = spec.kernel;
  const std::size_t Ho = conv_out_extent(H, spec), Wo = conv_out_extent(W, spec);
  require_shape(grad_out, {N, F, Ho, Wo}, "conv2d grad_out");

  Conv2dGrads<T> g{Tensor<T>({N, C, H, W}), Tensor<T>({F, C, K, K}), Tensor<T>({F})};
  const T* in = input.data.data();
  const T* w = weights.data.data();
  const T* go = grad_out.data.data();
  const long S = static_cast<long>(spec.stride), P = static_cast<long>(spec.padding);

  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t f = 0; f < F; ++f) {
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          const T gv = go[((n * F + f) * Ho + oh) * Wo + ow];
          g.bias.data[f] += gv;
          for (std::size_t c = 0; c < C; ++c) {
            const T* ip = in + ((n * C + c) * H) * W;
            T* gip = g.input.data.data() + ((n * C + c) * H) * W;
            const T* wp = w + ((f * C + c) * K) * K;
            T* gwp = g.weights.data.data() + ((f * C + c) * K) * K;
            for (std::size_t kh = 0; kh < K; ++kh) {
              const long ih = static_cast<long>(oh) * S + static_cast<long>(kh) - P;
              if (ih < 0 || ih >= static_cast<long>(H)) continue;
              for (std::size_t kw = 0; kw < K; ++kw) {
                const long iw = static_cast<long>(ow) * S + static_cast<long>(kw) - P;
                if (iw < 0 || iw >= static_cast<long>(W)) continue;
                const long ii = ih * static_cast<long>(W) + iw;
                gwp[kh * K + kw] += gv * ip[ii];
                gip[ii] += gv * wp[kh * K + kw];
              }
            }
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Batch normalization over the channel axis (axis 1) of an [N,C,...] tensor.
// Batch variance is the population (divide-by-m) variance.

enum class BnMode { train, infer };

template <typename T>
struct BatchNormState {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T epsilon = static_cast<T>(1e-5);
  T momentum = static_cast<T>(0.9);  // running = momentum*running + (1-momentum)*batch

  static BatchNormState init(std::size_t channels) {
    BatchNormState s;
    s.gamma = Tensor<T>::full({channels}, T(1));
    s.beta = Tensor<T>::zeros({channels});
    s.running_mean = Tensor<T>::zeros({channels});
    s.running_var = Tensor<T>::full({channels}, T(1));
    return s;
  }

  std::size_t channels() const { return gamma.numel(); }
};

template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;            // normalized input
  std::vector<T> inv_std;    // per-channel 1/sqrt(var + eps), batch statistics
  bool train = false;
};

template <typename T>
struct BatchNormResult {
  Tensor<T> y;
  BatchNormCache<T> cache;
  BatchNormState<T> state;   // running statistics advanced in train mode
};

template <typename T>
BatchNormResult<T> batchnorm_forward(const Tensor<T>& x, const BatchNormState<T>& state,
                                     BnMode mode) {
  if (x.rank() < 2) throw shape_error("batchnorm input must have rank >= 2");
  const std::size_t N = x.extent(0), C = x.extent(1);
  if (C != state.channels()) {
    throw shape_error("batchnorm state has " + std::to_string(state.channels()) +
                      " channels, input has " + std::to_string(C));
  }
  if (mode == BnMode::train && N == 0) throw shape_error("batchnorm: empty batch");

  std::size_t inner = 1;
  for (std::size_t a = 2; a < x.rank(); ++a) inner *= x.extent(a);
  const std::size_t m = N * inner;

  BatchNormResult<T> r{Tensor<T>(x.shape), BatchNormCache<T>{Tensor<T>(x.shape), {}, mode == BnMode::train}, state};
  r.cache.inv_std.resize(C);

  for (std::size_t c = 0; c < C; ++c) {
    T mean, inv_std;
    if (mode == BnMode::train) {
      T sum = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data.data() + (n * C + c) * inner;
        for (std::size_t s = 0; s < inner; ++s) sum += p[s];
      }
      mean = sum / static_cast<T>(m);
      T var_sum = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data.data() + (n * C + c) * inner;
        for (std::size_t s = 0; s < inner; ++s) {
          const T d = p[s] - mean;
          var_sum += d * d;
        }
      }
      const T var = var_sum / static_cast<T>(m);
      inv_std = T(1) / std::sqrt(var + state.epsilon);
      r.state.running_mean.data[c] = state.momentum * state.running_mean.data[c] +
                                     (T(1) - state.momentum) * mean;
      r.state.running_var.data[c] = state.momentum * state.running_var.data[c] +
                                    (T(1) - state.momentum) * var;
    } else {
      mean = state.running_mean.data[c];
      inv_std = T(1) / std::sqrt(state.running_var.data[c] + state.epsilon);
    }
    r.cache.inv_std[c] = inv_std;
    const T gamma = state.gamma.data[c], beta = state.beta.data[c];
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = x.data.data() + (n * C + c) * inner;
      T* xh = r.cache.xhat.data.data() + (n * C + c) * inner;
      T* yp = r.y.data.data() + (n * C + c) * inner;
      for (std::size_t s = 0; s < inner; ++s) {
        xh[s] = (p[s] - mean) * inv_std;
        yp[s] = gamma * xh[s] + beta;
      }
    }
  }
  return r;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> x;
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const Tensor<T>& grad_out, const BatchNormCache<T>& cache,
                                     const BatchNormState<T>& state) {
  if (!cache.train) {
    throw shape_error("batchnorm_backward requires a train-mode cache");
  }
  require_shape(grad_out, cache.xhat.shape, "batchnorm grad_out");
  const std::size_t N = grad_out.extent(0), C = grad_out.extent(1);
  std::size_t inner = 1;
  for (std::size_t a = 2; a < grad_out.rank(); ++a) inner *= grad_out.extent(a);
  const std::size_t m = N * inner;

  BatchNormGrads<T> g{Tensor<T>(grad_out.shape), Tensor<T>({C}), Tensor<T>({C})};
  for (std::size_t c = 0; c < C; ++c) {
    const T gamma = state.gamma.data[c];
    const T inv_std = cache.inv_std[c];
    // sums of grad_xhat and grad_xhat*xhat over batch and spatial positions
    T s1 = 0, s2 = 0, gbeta = 0, ggamma = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t base = (n * C + c) * inner;
      const T* go = grad_out.data.data() + base;
      const T* xh = cache.xhat.data.data() + base;
      for (std::size_t s = 0; s < inner; ++s) {
        const T gxh = go[s] * gamma;
        s1 += gxh;
        s2 += gxh * xh[s];
        gbeta += go[s];
        ggamma += go[s] * xh[s];
      }
    }
    g.gamma.data[c] = ggamma;
    g.beta.data[c] = gbeta;
    const T scale = inv_std / static_cast<T>(m);
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t base = (n * C + c) * inner;
      const T* go = grad_out.data.data() + base;
      const T* xh = cache.xhat.data.data() + base;
      T* gx = g.x.data.data() + base;
      for (std::size_t s = 0; s < inner; ++s) {
        const T gxh = go[s] * gamma;
        gx[s] = scale * (static_cast<T>(m) * gxh - s1 - xh[s] * s2);
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Elementwise activations.

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (T& v : y.data) v = v > T(0) ? v : T(0);
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& x) {
  require_shape(grad_out, x.shape, "relu grad_out");
  Tensor<T> g(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    g.data[i] = x.data[i] > T(0) ? grad_out.data[i] : T(0);
  }
  return g;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    y.data[i] = T(1) / (T(1) + std::exp(-x.data[i]));
  }
  return y;
}

// Takes the forward output y = sigmoid(x).
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& grad_out, const Tensor<T>& y) {
  require_shape(grad_out, y.shape, "sigmoid grad_out");
  Tensor<T> g(y.shape);
  for (std::size_t i = 0; i < y.numel(); ++i) {
    g.data[i] = grad_out.data[i] * y.data[i] * (T(1) - y.data[i]);
  }
  return g;
}

// Softmax along `axis`, max-subtracted for overflow safety.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw shape_error("softmax axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= x.extent(a);
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.extent(a);
  const std::size_t len = x.extent(axis);

  Tensor<T> y(x.shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      T mx = x.data[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, x.data[base + k * inner]);
      T sum = 0;
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(x.data[base + k * inner] - mx);
        y.data[base + k * inner] = e;
        sum += e;
      }
      for (std::size_t k = 0; k < len; ++k) y.data[base + k * inner] /= sum;
    }
  }
  return y;
}

// Takes the forward output y = softmax(x, axis).
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& grad_out, const Tensor<T>& y, std::size_t axis) {
  require_shape(grad_out, y.shape, "softmax grad_out");
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= y.extent(a);
  for (std::size_t a = axis + 1; a < y.rank(); ++a) inner *= y.extent(a);
  const std::size_t len = y.extent(axis);

  Tensor<T> g(y.shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      T dot = 0;
      for (std::size_t k = 0; k < len; ++k) {
        dot += grad_out.data[base + k * inner] * y.data[base + k * inner];
      }
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t at = base + k * inner;
        g.data[at] = y.data[at] * (grad_out.data[at] - dot);
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Fully connected layer: y = x @ W + b  with x [N,D], W [D,K], b [K].

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(x, 2, "dense input");
  require_rank(weight, 2, "dense weight");
  const std::size_t N = x.extent(0), D = x.extent(1), K = weight.extent(1);
  if (weight.extent(0) != D) {
    throw shape_error("dense weight shape " + shape_str(weight.shape) +
                      " incompatible with input " + shape_str(x.shape));
  }
  require_shape(bias, {K}, "dense bias");

  Tensor<T> y({N, K});
  for (std::size_t n = 0; n < N; ++n) {
    const T* xp = x.data.data() + n * D;
    T* yp = y.data.data() + n * K;
    for (std::size_t k = 0; k < K; ++k) yp[k] = bias.data[k];
    for (std::size_t d = 0; d < D; ++d) {
      const T xv = xp[d];
      const T* wp = weight.data.data() + d * K;
      for (std::size_t k = 0; k < K; ++k) yp[k] += xv * wp[k];
    }
  }
  return y;
}

template <typename T>
struct DenseGrads {
  Tensor<T> x;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& grad_out, const Tensor<T>& x,
                             const Tensor<T>& weight) {
  const std::size_t N = x.extent(0), D = x.extent(1), K = weight.extent(1);
  require_shape(grad_out, {N, K}, "dense grad_out");

  DenseGrads<T> g{Tensor<T>({N, D}), Tensor<T>({D, K}), Tensor<T>({K})};
  for (std::size_t n = 0; n < N; ++n) {
    const T* go = grad_out.data.data() + n * K;
    const T* xp = x.data.data() + n * D;
    T* gx = g.x.data.data() + n * D;
    for (std::size_t k = 0; k < K; ++k) g.bias.data[k] += go[k];
    for (std::size_t d = 0; d < D; ++d) {
      const T* wp = weight.data.data() + d * K;
      T* gwp = g.weight.data.data() + d * K;
      T acc = 0;
      for (std::size_t k = 0; k < K; ++k) {
        acc += go[k] * wp[k];
        gwp[k] += xp[d] * go[k];
      }
      gx[d] = acc;
    }
  }
  return g;
}

}  // namespace colorcaps
