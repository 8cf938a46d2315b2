#pragma once

#include <cstdint>
#include <vector>

#include "colorcaps/capsnet.hpp"
#include "colorcaps/gradcheck.hpp"
#include "colorcaps/rng.hpp"

namespace colorcaps {

// End-to-end gradient verification: the analytic gradient of the MSE training
// loss with respect to every model parameter, against central finite
// differences, everything evaluated in 64-bit.

struct ModelCheckReport {
  double worst_rel_err = 0.0;
  std::size_t coords_checked = 0;
};

namespace detail {

template <typename T>
void assign_parameters(ModelParams<T>& model, const std::vector<Tensor<T>>& values) {
  auto slots = named_parameters(model);
  for (std::size_t i = 0; i < slots.size(); ++i) *slots[i].second = values[i];
}

}  // namespace detail

// `samples_per_tensor` == 0 sweeps every coordinate; otherwise that many
// randomly chosen coordinates per parameter tensor are differenced.
inline ModelCheckReport model_gradient_check(const ColorCapsNetConfig& config,
                                             std::uint64_t seed, std::size_t batch,
                                             std::size_t samples_per_tensor = 0) {
  ModelParams<double> model = build_model(config, seed).cast<double>();
  Rng rng(seed + 1);

  const std::size_t n = config.patch_size;
  TensorD gray({batch, 1, n, n}), target({batch, 3, n, n});
  for (double& v : gray.data) v = rng.uniform(0.05, 0.95);
  for (double& v : target.data) v = rng.uniform(0.05, 0.95);

  std::vector<TensorD> point;
  for (auto& [name, t] : named_parameters(model)) {
    (void)name;
    point.push_back(*t);
  }

  const auto f = [&](const std::vector<TensorD>& params) {
    ModelParams<double> m = model;
    detail::assign_parameters(m, params);
    auto fwd = forward(m, gray, RunMode::train);
    return mse_loss(fwd.lab_pred, target).value;
  };

  // Analytic gradients via the hand-written reverse pass.
  std::vector<TensorD> analytic;
  {
    auto fwd = forward(model, gray, RunMode::train);
    auto loss = mse_loss(fwd.lab_pred, target);
    ModelGrads<double> grads = backward(model, fwd.cache, loss.grad);
    for (auto& [name, t] : named_gradients(grads)) {
      (void)name;
      analytic.push_back(*t);
    }
  }

  constexpr double step = 1e-3;
  ModelCheckReport report;
  std::vector<TensorD> probe = point;
  for (std::size_t t = 0; t < point.size(); ++t) {
    std::vector<std::size_t> coords;
    if (samples_per_tensor == 0 || point[t].numel() <= samples_per_tensor) {
      coords.resize(point[t].numel());
      for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
      for (std::size_t k = 0; k < samples_per_tensor; ++k) {
        coords.push_back(rng.below(point[t].numel()));
      }
    }
    for (std::size_t i : coords) {
      const double saved = probe[t].data[i];
      probe[t].data[i] = saved + step;
      const double fp = f(probe);
      probe[t].data[i] = saved - step;
      const double fm = f(probe);
      probe[t].data[i] = saved;
      const double numeric = (fp - fm) / (2.0 * step);
      const double err = relative_error(analytic[t].data[i], numeric);
      if (err > report.worst_rel_err) report.worst_rel_err = err;
      ++report.coords_checked;
    }
  }
  return report;
}

// The width-reduced topology used for exhaustive gradient verification.
inline ColorCapsNetConfig reduced_check_config() {
  ColorCapsNetConfig cfg;
  cfg.feature_filters = 8;
  cfg.primary_capsule_count = 4;
  cfg.primary_capsule_dim = 8;
  cfg.decoder_hidden = {16, 32};
  return cfg;
}

}  // namespace colorcaps
