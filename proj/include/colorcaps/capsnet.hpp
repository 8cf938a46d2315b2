#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "colorcaps/adam.hpp"
#include "colorcaps/checkpoint.hpp"
#include "colorcaps/ops.hpp"
#include "colorcaps/rng.hpp"
#include "colorcaps/tensor.hpp"

namespace colorcaps {

// ---------------------------------------------------------------------------
// Configuration.

enum class LossKind { mse, margin };

inline std::string loss_name(LossKind k) { return k == LossKind::mse ? "mse" : "margin"; }

inline LossKind loss_from_name(const std::string& s) {
  if (s == "mse") return LossKind::mse;
  if (s == "margin") return LossKind::margin;
  throw config_error("unknown loss '" + s + "' (want mse or margin)");
}

struct ColorCapsNetConfig {
  std::size_t patch_size = 9;             // n
  std::size_t routing_iterations = 1;     // r
  std::size_t num_output_capsules = 6;    // C
  std::size_t output_capsule_dim = 16;
  std::size_t primary_capsule_count = 32;
  std::size_t primary_capsule_dim = 8;
  std::size_t feature_filters = 64;       // width of the two 3x3 feature convs
  std::vector<std::size_t> decoder_hidden = {512, 1024};
  LossKind loss = LossKind::mse;
  double margin_lambda = 0.5;

  void validate() const {
    if (patch_size < 9) throw config_error("patch size must be >= 9");
    if (routing_iterations < 1) throw config_error("routing iterations must be >= 1");
    if (num_output_capsules < 1) throw config_error("need at least one output capsule");
    if (output_capsule_dim < 1 || primary_capsule_count < 1 || primary_capsule_dim < 1 ||
        feature_filters < 1) {
      throw config_error("capsule/filter dimensions must be >= 1");
    }
  }

  std::size_t decoder_input() const { return num_output_capsules * output_capsule_dim; }
  std::size_t decoder_output() const { return 3 * patch_size * patch_size; }
  std::size_t primary_channels() const { return primary_capsule_count * primary_capsule_dim; }
};

// ---------------------------------------------------------------------------
// Capsule primitives.

template <typename T>
struct CapsuleSet {
  Tensor<T> activities;  // [batch, count, dim]
};

// v = (|s|^2 / (1 + |s|^2)) * s/|s| applied to every last-axis vector;
// squash(0) = 0 via the 1e-8 norm guard.
template <typename T>
Tensor<T> squash_vectors(const Tensor<T>& s) {
  if (s.rank() < 1) throw shape_error("squash input must have rank >= 1");
  const std::size_t dim = s.extent(s.rank() - 1);
  const std::size_t rows = s.numel() / dim;
  Tensor<T> v(s.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* sp = s.data.data() + r * dim;
    T* vp = v.data.data() + r * dim;
    T nsq = 0;
    for (std::size_t k = 0; k < dim; ++k) nsq += sp[k] * sp[k];
    const T norm = std::sqrt(nsq);
    const T scale = nsq / ((T(1) + nsq) * (norm + static_cast<T>(1e-8)));
    for (std::size_t k = 0; k < dim; ++k) vp[k] = scale * sp[k];
  }
  return v;
}

template <typename T>
Tensor<T> squash_vectors_backward(const Tensor<T>& grad_out, const Tensor<T>& s) {
  require_shape(grad_out, s.shape, "squash grad_out");
  const std::size_t dim = s.extent(s.rank() - 1);
  const std::size_t rows = s.numel() / dim;
  Tensor<T> g(s.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* sp = s.data.data() + r * dim;
    const T* gp = grad_out.data.data() + r * dim;
    T* out = g.data.data() + r * dim;
    T nsq = 0, dot = 0;
    for (std::size_t k = 0; k < dim; ++k) {
      nsq += sp[k] * sp[k];
      dot += sp[k] * gp[k];
    }
    const T norm = std::sqrt(nsq);
    const T denom = T(1) + nsq;
    // d(alpha(n) s)/ds with alpha = n/(1+n^2); guarded like the forward pass
    const T alpha = nsq / (denom * (norm + static_cast<T>(1e-8)));
    const T beta = (T(1) - nsq) / (denom * denom * (norm + static_cast<T>(1e-8)));
    for (std::size_t k = 0; k < dim; ++k) out[k] = alpha * gp[k] + beta * dot * sp[k];
  }
  return g;
}

// u-hat: prediction of each output capsule from each primary capsule.
// u [B,P,pd] x W [P,C,pd,od] -> [B,P,C,od]
template <typename T>
Tensor<T> capsule_predictions(const Tensor<T>& u, const Tensor<T>& weight) {
  require_rank(u, 3, "capsule activities");
  require_rank(weight, 4, "routing weight");
  const std::size_t B = u.extent(0), P = u.extent(1), pd = u.extent(2);
  const std::size_t C = weight.extent(1), od = weight.extent(3);
  if (weight.extent(0) != P || weight.extent(2) != pd) {
    throw shape_error("routing weight " + shape_str(weight.shape) +
                      " incompatible with capsules " + shape_str(u.shape));
  }
  Tensor<T> uhat({B, P, C, od});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < P; ++i) {
      const T* up = u.data.data() + (b * P + i) * pd;
      for (std::size_t j = 0; j < C; ++j) {
        T* out = uhat.data.data() + ((b * P + i) * C + j) * od;
        const T* wp = weight.data.data() + (i * C + j) * pd * od;
        for (std::size_t d = 0; d < pd; ++d) {
          const T uv = up[d];
          for (std::size_t k = 0; k < od; ++k) out[k] += uv * wp[d * od + k];
        }
      }
    }
  }
  return uhat;
}

template <typename T>
struct CapsulePredictionGrads {
  Tensor<T> u;
  Tensor<T> weight;
};

template <typename T>
CapsulePredictionGrads<T> capsule_predictions_backward(const Tensor<T>& grad_uhat,
                                                       const Tensor<T>& u,
                                                       const Tensor<T>& weight) {
  const std::size_t B = u.extent(0), P = u.extent(1), pd = u.extent(2);
  const std::size_t C = weight.extent(1), od = weight.extent(3);
  require_shape(grad_uhat, {B, P, C, od}, "prediction grad");

  CapsulePredictionGrads<T> g{Tensor<T>({B, P, pd}), Tensor<T>({P, C, pd, od})};
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < P; ++i) {
      const T* up = u.data.data() + (b * P + i) * pd;
      T* gu = g.u.data.data() + (b * P + i) * pd;
      for (std::size_t j = 0; j < C; ++j) {
        const T* go = grad_uhat.data.data() + ((b * P + i) * C + j) * od;
        const T* wp = weight.data.data() + (i * C + j) * pd * od;
        T* gw = g.weight.data.data() + (i * C + j) * pd * od;
        for (std::size_t d = 0; d < pd; ++d) {
          T acc = 0;
          for (std::size_t k = 0; k < od; ++k) {
            acc += go[k] * wp[d * od + k];
            gw[d * od + k] += up[d] * go[k];
          }
          gu[d] += acc;
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Routing-by-agreement.

template <typename T>
struct RoutingTrace {
  std::vector<Tensor<T>> couplings;  // per iteration, each [B,P,C]
};

template <typename T>
struct RoutingResult {
  Tensor<T> activities;  // v [B,C,od]
  Tensor<T> pre_squash;  // s [B,C,od] from the final iteration
  Tensor<T> couplings;   // [B,P,C] used in the final weighted sum
};

// Logits start at zero; each iteration softmaxes them over the C output
// capsules, forms s_j = sum_i c_ij u-hat_ij, squashes, and (except after the
// final pass) adds the agreement u-hat . v back onto the logits.
template <typename T>
RoutingResult<T> dynamic_routing(const Tensor<T>& uhat, std::size_t iterations,
                                 RoutingTrace<T>* trace = nullptr) {
  require_rank(uhat, 4, "routing predictions");
  if (iterations < 1) throw config_error("routing iterations must be >= 1");
  const std::size_t B = uhat.extent(0), P = uhat.extent(1);
  const std::size_t C = uhat.extent(2), od = uhat.extent(3);

  Tensor<T> logits({B, P, C});
  RoutingResult<T> r;
  for (std::size_t it = 0; it < iterations; ++it) {
    r.couplings = softmax(logits, 2);
    if (trace) trace->couplings.push_back(r.couplings);

    r.pre_squash = Tensor<T>({B, C, od});
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < P; ++i) {
        for (std::size_t j = 0; j < C; ++j) {
          const T c = r.couplings.at(b, i, j);
          const T* up = uhat.data.data() + ((b * P + i) * C + j) * od;
          T* sp = r.pre_squash.data.data() + (b * C + j) * od;
          for (std::size_t k = 0; k < od; ++k) sp[k] += c * up[k];
        }
      }
    }
    r.activities = squash_vectors(r.pre_squash);

    if (it + 1 < iterations) {
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < P; ++i) {
          for (std::size_t j = 0; j < C; ++j) {
            const T* up = uhat.data.data() + ((b * P + i) * C + j) * od;
            const T* vp = r.activities.data.data() + (b * C + j) * od;
            T agreement = 0;
            for (std::size_t k = 0; k < od; ++k) agreement += up[k] * vp[k];
            logits.at(b, i, j) += agreement;
          }
        }
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Model parameters.

template <typename T>
struct ConvLayer {
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
struct DenseLayer {
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
struct ModelParams {
  ColorCapsNetConfig config;
  ConvLayer<T> conv1, conv2, caps_conv;
  BatchNormState<T> bn1, bn2, caps_bn;
  Tensor<T> routing_weight;  // [P, C, pd, od]
  std::vector<DenseLayer<T>> decoder;

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.config = config;
    auto conv = [](const ConvLayer<T>& c) {
      return ConvLayer<U>{c.weight.template cast<U>(), c.bias.template cast<U>()};
    };
    auto bn = [](const BatchNormState<T>& s) {
      BatchNormState<U> o;
      o.gamma = s.gamma.template cast<U>();
      o.beta = s.beta.template cast<U>();
      o.running_mean = s.running_mean.template cast<U>();
      o.running_var = s.running_var.template cast<U>();
      o.epsilon = static_cast<U>(s.epsilon);
      o.momentum = static_cast<U>(s.momentum);
      return o;
    };
    out.conv1 = conv(conv1);
    out.conv2 = conv(conv2);
    out.caps_conv = conv(caps_conv);
    out.bn1 = bn(bn1);
    out.bn2 = bn(bn2);
    out.caps_bn = bn(caps_bn);
    out.routing_weight = routing_weight.template cast<U>();
    for (const auto& d : decoder) {
      out.decoder.push_back(DenseLayer<U>{d.weight.template cast<U>(), d.bias.template cast<U>()});
    }
    return out;
  }
};

template <typename T>
struct ModelGrads {
  Tensor<T> conv1_weight, conv1_bias, bn1_gamma, bn1_beta;
  Tensor<T> conv2_weight, conv2_bias, bn2_gamma, bn2_beta;
  Tensor<T> caps_conv_weight, caps_conv_bias, caps_bn_gamma, caps_bn_beta;
  Tensor<T> routing_weight;
  std::vector<DenseLayer<T>> decoder;
};

// Trainable tensors in a stable, documented order. Checkpoint entries, Adam
// slots and gradient pairing all follow this order.
template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> named_parameters(ModelParams<T>& m) {
  std::vector<std::pair<std::string, Tensor<T>*>> v = {
      {"conv1.weight", &m.conv1.weight},       {"conv1.bias", &m.conv1.bias},
      {"bn1.gamma", &m.bn1.gamma},             {"bn1.beta", &m.bn1.beta},
      {"conv2.weight", &m.conv2.weight},       {"conv2.bias", &m.conv2.bias},
      {"bn2.gamma", &m.bn2.gamma},             {"bn2.beta", &m.bn2.beta},
      {"caps_conv.weight", &m.caps_conv.weight}, {"caps_conv.bias", &m.caps_conv.bias},
      {"caps_bn.gamma", &m.caps_bn.gamma},     {"caps_bn.beta", &m.caps_bn.beta},
      {"routing.weight", &m.routing_weight},
  };
  for (std::size_t l = 0; l < m.decoder.size(); ++l) {
    v.emplace_back("decoder." + std::to_string(l) + ".weight", &m.decoder[l].weight);
    v.emplace_back("decoder." + std::to_string(l) + ".bias", &m.decoder[l].bias);
  }
  return v;
}

// Adds the batch-norm running statistics (persisted but not optimized).
template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> named_state(ModelParams<T>& m) {
  auto v = named_parameters(m);
  v.emplace_back("bn1.running_mean", &m.bn1.running_mean);
  v.emplace_back("bn1.running_var", &m.bn1.running_var);
  v.emplace_back("bn2.running_mean", &m.bn2.running_mean);
  v.emplace_back("bn2.running_var", &m.bn2.running_var);
  v.emplace_back("caps_bn.running_mean", &m.caps_bn.running_mean);
  v.emplace_back("caps_bn.running_var", &m.caps_bn.running_var);
  return v;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> named_gradients(ModelGrads<T>& g) {
  std::vector<std::pair<std::string, Tensor<T>*>> v = {
      {"conv1.weight", &g.conv1_weight},       {"conv1.bias", &g.conv1_bias},
      {"bn1.gamma", &g.bn1_gamma},             {"bn1.beta", &g.bn1_beta},
      {"conv2.weight", &g.conv2_weight},       {"conv2.bias", &g.conv2_bias},
      {"bn2.gamma", &g.bn2_gamma},             {"bn2.beta", &g.bn2_beta},
      {"caps_conv.weight", &g.caps_conv_weight}, {"caps_conv.bias", &g.caps_conv_bias},
      {"caps_bn.gamma", &g.caps_bn_gamma},     {"caps_bn.beta", &g.caps_bn_beta},
      {"routing.weight", &g.routing_weight},
  };
  for (std::size_t l = 0; l < g.decoder.size(); ++l) {
    v.emplace_back("decoder." + std::to_string(l) + ".weight", &g.decoder[l].weight);
    v.emplace_back("decoder." + std::to_string(l) + ".bias", &g.decoder[l].bias);
  }
  return v;
}

// Model with the right tensor shapes, all parameters zero / BN at identity.
inline ModelParams<float> model_skeleton(const ColorCapsNetConfig& config) {
  config.validate();
  const std::size_t F = config.feature_filters, n = config.patch_size;
  const std::size_t P = config.primary_capsule_count, pd = config.primary_capsule_dim;
  const std::size_t C = config.num_output_capsules, od = config.output_capsule_dim;

  ModelParams<float> m;
  m.config = config;
  m.conv1 = {TensorF({F, 1, 3, 3}), TensorF({F})};
  m.conv2 = {TensorF({F, F, 3, 3}), TensorF({F})};
  m.caps_conv = {TensorF({P * pd, F, n, n}), TensorF({P * pd})};
  m.bn1 = BatchNormState<float>::init(F);
  m.bn2 = BatchNormState<float>::init(F);
  m.caps_bn = BatchNormState<float>::init(P * pd);
  m.routing_weight = TensorF({P, C, pd, od});

  std::size_t in = config.decoder_input();
  for (std::size_t h : config.decoder_hidden) {
    m.decoder.push_back({TensorF({in, h}), TensorF({h})});
    in = h;
  }
  m.decoder.push_back({TensorF({in, config.decoder_output()}), TensorF({config.decoder_output()})});
  return m;
}

namespace detail {

inline void fill_normal(TensorF& t, Rng& rng, double stddev) {
  for (float& v : t.data) v = static_cast<float>(rng.normal() * stddev);
}

inline void fill_uniform_sym(TensorF& t, Rng& rng, double bound) {
  for (float& v : t.data) v = static_cast<float>(rng.uniform(-bound, bound));
}

}  // namespace detail

// The canonical name map for importing pretrained feature-detector weights.
inline std::vector<std::pair<std::string, std::string>> vgg_name_map() {
  return {{"vgg.conv1_1.weight", "conv1.weight"},
          {"vgg.conv1_1.bias", "conv1.bias"},
          {"vgg.conv1_2.weight", "conv2.weight"},
          {"vgg.conv1_2.bias", "conv2.bias"}};
}

// Deterministic initialization from `seed`: conv kernels ~ N(0, 2/fan_in),
// dense and routing weights ~ U(+-sqrt(6/(fan_in+fan_out))), biases zero.
// When `vgg_weights` is given, the two feature convs are overwritten with the
// imported tensors (grayscale single-channel conv1; RGB-trained kernels are
// expected to be collapsed by summing over the input-channel axis when the
// import file is produced). Imported layers stay trainable.
inline ModelParams<float> build_model(const ColorCapsNetConfig& config, std::uint64_t seed,
                                      const Checkpoint* vgg_weights = nullptr) {
  ModelParams<float> m = model_skeleton(config);
  Rng rng(seed);

  auto conv_init = [&](ConvLayer<float>& layer) {
    const Shape& s = layer.weight.shape;
    const double fan_in = static_cast<double>(s[1] * s[2] * s[3]);
    detail::fill_normal(layer.weight, rng, std::sqrt(2.0 / fan_in));
  };
  conv_init(m.conv1);
  conv_init(m.conv2);
  conv_init(m.caps_conv);

  const double rb = std::sqrt(6.0 / static_cast<double>(config.primary_capsule_dim +
                                                        config.output_capsule_dim));
  detail::fill_uniform_sym(m.routing_weight, rng, rb);

  for (auto& layer : m.decoder) {
    const double fan_in = static_cast<double>(layer.weight.extent(0));
    const double fan_out = static_cast<double>(layer.weight.extent(1));
    detail::fill_uniform_sym(layer.weight, rng, std::sqrt(6.0 / (fan_in + fan_out)));
  }

  if (vgg_weights) {
    const auto map = vgg_name_map();
    auto slots = named_parameters(m);
    // Report every missing or mis-shaped tensor at once.
    std::string offending;
    for (const auto& [src, dst] : map) {
      const Checkpoint::Entry* e = vgg_weights->find(src);
      TensorF* slot = nullptr;
      for (auto& [name, t] : slots) {
        if (name == dst) slot = t;
      }
      if (!e) {
        offending += (offending.empty() ? "" : ", ") + src + " (missing)";
      } else if (slot && e->shape != slot->shape) {
        offending += (offending.empty() ? "" : ", ") + src + " (shape " + shape_str(e->shape) +
                     ", want " + shape_str(slot->shape) + ")";
      }
    }
    if (!offending.empty()) {
      throw io_error("vgg import failed: " + offending);
    }
    import_external(*vgg_weights, slots, map);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Parameter counting.

struct ParamCount {
  std::size_t total = 0;
  std::vector<std::pair<std::string, std::size_t>> breakdown;
};

inline ParamCount count_parameters(const ColorCapsNetConfig& config) {
  config.validate();
  const std::size_t F = config.feature_filters, n = config.patch_size;
  const std::size_t P = config.primary_capsule_count, pd = config.primary_capsule_dim;
  const std::size_t C = config.num_output_capsules, od = config.output_capsule_dim;

  ParamCount pc;
  auto add = [&pc](const std::string& name, std::size_t count) {
    pc.breakdown.emplace_back(name, count);
    pc.total += count;
  };
  add("conv1", F * (1 * 3 * 3) + F);
  add("bn1", 2 * F);
  add("conv2", F * (F * 3 * 3) + F);
  add("bn2", 2 * F);
  add("caps_conv", (P * pd) * (F * n * n) + P * pd);
  add("caps_bn", 2 * P * pd);
  add("routing.weight", P * C * pd * od);
  std::size_t in = config.decoder_input();
  std::size_t l = 0;
  for (std::size_t h : config.decoder_hidden) {
    add("decoder." + std::to_string(l++), in * h + h);
    in = h;
  }
  add("decoder." + std::to_string(l), in * config.decoder_output() + config.decoder_output());
  return pc;
}

// ---------------------------------------------------------------------------
// Forward / backward.

enum class RunMode { train, infer };

template <typename T>
struct ForwardCache {
  Tensor<T> input;
  Tensor<T> conv1_out;
  BatchNormCache<T> bn1;
  Tensor<T> relu1_in, relu1_out;
  Tensor<T> conv2_out;
  BatchNormCache<T> bn2;
  Tensor<T> relu2_in, relu2_out;
  Tensor<T> caps_conv_out;
  BatchNormCache<T> caps_bn;
  Tensor<T> primary_pre;   // [B,P,pd] before squash
  Tensor<T> primary;       // u after squash
  Tensor<T> uhat;          // [B,P,C,od]
  Tensor<T> couplings;     // [B,P,C], final routing iteration
  Tensor<T> routed_pre;    // s [B,C,od]
  Tensor<T> caps_v;        // v [B,C,od]
  std::vector<Tensor<T>> dense_in;      // input of each decoder layer
  std::vector<Tensor<T>> dense_preact;  // pre-activation output of each layer
  Tensor<T> sigmoid_out;   // [B, 3*n*n]
};

template <typename T>
struct ForwardResult {
  Tensor<T> lab_pred;      // [B,3,n,n] in (0,1)
  CapsuleSet<T> caps;      // routed capsule activities
  ForwardCache<T> cache;
  BatchNormState<T> bn1, bn2, caps_bn;  // running stats advanced in train mode
};

template <typename T>
ForwardResult<T> forward(const ModelParams<T>& model, const Tensor<T>& gray, RunMode mode) {
  const ColorCapsNetConfig& cfg = model.config;
  const std::size_t n = cfg.patch_size;
  require_rank(gray, 4, "forward input");
  if (gray.extent(1) != 1 || gray.extent(2) != n || gray.extent(3) != n) {
    throw shape_error("forward input must be [batch,1," + std::to_string(n) + "," +
                      std::to_string(n) + "], got " + shape_str(gray.shape));
  }
  for (T v : gray.data) {
    if (!(v >= T(0) && v <= T(1))) {
      throw domain_error("forward input values must lie in [0,1]");
    }
  }
  const std::size_t B = gray.extent(0);
  const BnMode bn_mode = mode == RunMode::train ? BnMode::train : BnMode::infer;

  ForwardResult<T> r;
  ForwardCache<T>& cc = r.cache;
  cc.input = gray;

  const ConvSpec spec1{1, cfg.feature_filters, 3, 1, 1};
  const ConvSpec spec2{cfg.feature_filters, cfg.feature_filters, 3, 1, 1};
  const ConvSpec spec_caps{cfg.feature_filters, cfg.primary_channels(), n, 1, 0};

  cc.conv1_out = conv2d_forward(gray, model.conv1.weight, model.conv1.bias, spec1);
  auto bn1r = batchnorm_forward(cc.conv1_out, model.bn1, bn_mode);
  r.bn1 = std::move(bn1r.state);
  cc.bn1 = std::move(bn1r.cache);
  cc.relu1_in = std::move(bn1r.y);
  cc.relu1_out = relu(cc.relu1_in);

  cc.conv2_out = conv2d_forward(cc.relu1_out, model.conv2.weight, model.conv2.bias, spec2);
  auto bn2r = batchnorm_forward(cc.conv2_out, model.bn2, bn_mode);
  r.bn2 = std::move(bn2r.state);
  cc.bn2 = std::move(bn2r.cache);
  cc.relu2_in = std::move(bn2r.y);
  cc.relu2_out = relu(cc.relu2_in);

  cc.caps_conv_out = conv2d_forward(cc.relu2_out, model.caps_conv.weight, model.caps_conv.bias,
                                    spec_caps);  // [B, P*pd, 1, 1]
  auto bn3r = batchnorm_forward(cc.caps_conv_out, model.caps_bn, bn_mode);
  r.caps_bn = std::move(bn3r.state);
  cc.caps_bn = std::move(bn3r.cache);

  cc.primary_pre = bn3r.y.reshaped({B, cfg.primary_capsule_count, cfg.primary_capsule_dim});
  cc.primary = squash_vectors(cc.primary_pre);

  cc.uhat = capsule_predictions(cc.primary, model.routing_weight);
  auto routed = dynamic_routing(cc.uhat, cfg.routing_iterations);
  cc.couplings = std::move(routed.couplings);
  cc.routed_pre = std::move(routed.pre_squash);
  cc.caps_v = routed.activities;

  Tensor<T> h = cc.caps_v.reshaped({B, cfg.decoder_input()});
  for (std::size_t l = 0; l < model.decoder.size(); ++l) {
    cc.dense_in.push_back(h);
    Tensor<T> pre = dense_forward(h, model.decoder[l].weight, model.decoder[l].bias);
    cc.dense_preact.push_back(pre);
    h = l + 1 < model.decoder.size() ? relu(pre) : sigmoid(pre);
  }
  cc.sigmoid_out = h;

  r.lab_pred = h.reshaped({B, 3, n, n});
  r.caps = CapsuleSet<T>{std::move(routed.activities)};
  return r;
}

// Reverse pass. Routing couplings are treated as constants: gradients flow
// through the prediction vectors and the final weighted sum only (exact for
// a single routing iteration).
template <typename T>
ModelGrads<T> backward(const ModelParams<T>& model, const ForwardCache<T>& cache,
                       const Tensor<T>& grad_pred, const Tensor<T>* grad_caps = nullptr) {
  const ColorCapsNetConfig& cfg = model.config;
  const std::size_t B = cache.input.extent(0);
  const std::size_t n = cfg.patch_size;
  const std::size_t P = cfg.primary_capsule_count, pd = cfg.primary_capsule_dim;
  const std::size_t C = cfg.num_output_capsules, od = cfg.output_capsule_dim;
  require_shape(grad_pred, {B, 3, n, n}, "backward grad_pred");

  ModelGrads<T> g;

  // Decoder.
  Tensor<T> flow = sigmoid_backward(grad_pred.reshaped({B, 3 * n * n}), cache.sigmoid_out);
  g.decoder.resize(model.decoder.size());
  for (std::size_t l = model.decoder.size(); l-- > 0;) {
    auto dg = dense_backward(flow, cache.dense_in[l], model.decoder[l].weight);
    g.decoder[l] = DenseLayer<T>{std::move(dg.weight), std::move(dg.bias)};
    flow = std::move(dg.x);
    if (l > 0) flow = relu_backward(flow, cache.dense_preact[l - 1]);
  }

  // Routed capsules.
  Tensor<T> grad_v = flow.reshaped({B, C, od});
  if (grad_caps) {
    require_shape(*grad_caps, grad_v.shape, "backward grad_caps");
    for (std::size_t i = 0; i < grad_v.numel(); ++i) grad_v.data[i] += grad_caps->data[i];
  }
  const Tensor<T> grad_s = squash_vectors_backward(grad_v, cache.routed_pre);

  Tensor<T> grad_uhat({B, P, C, od});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < P; ++i) {
      for (std::size_t j = 0; j < C; ++j) {
        const T c = cache.couplings.at(b, i, j);
        const T* gs = grad_s.data.data() + (b * C + j) * od;
        T* gu = grad_uhat.data.data() + ((b * P + i) * C + j) * od;
        for (std::size_t k = 0; k < od; ++k) gu[k] = c * gs[k];
      }
    }
  }

  auto pg = capsule_predictions_backward(grad_uhat, cache.primary, model.routing_weight);
  g.routing_weight = std::move(pg.weight);

  // Primary capsules back to the feature stack.
  Tensor<T> grad_primary_pre = squash_vectors_backward(pg.u, cache.primary_pre);
  Tensor<T> grad_bn3_y = grad_primary_pre.reshaped({B, P * pd, 1, 1});
  auto bn3g = batchnorm_backward(grad_bn3_y, cache.caps_bn, model.caps_bn);
  g.caps_bn_gamma = std::move(bn3g.gamma);
  g.caps_bn_beta = std::move(bn3g.beta);

  const ConvSpec spec_caps{cfg.feature_filters, cfg.primary_channels(), n, 1, 0};
  auto caps_cg = conv2d_backward(bn3g.x, cache.relu2_out, model.caps_conv.weight, spec_caps);
  g.caps_conv_weight = std::move(caps_cg.weights);
  g.caps_conv_bias = std::move(caps_cg.bias);

  Tensor<T> grad_bn2_y = relu_backward(caps_cg.input, cache.relu2_in);
  auto bn2g = batchnorm_backward(grad_bn2_y, cache.bn2, model.bn2);
  g.bn2_gamma = std::move(bn2g.gamma);
  g.bn2_beta = std::move(bn2g.beta);

  const ConvSpec spec2{cfg.feature_filters, cfg.feature_filters, 3, 1, 1};
  auto c2g = conv2d_backward(bn2g.x, cache.relu1_out, model.conv2.weight, spec2);
  g.conv2_weight = std::move(c2g.weights);
  g.conv2_bias = std::move(c2g.bias);

  Tensor<T> grad_bn1_y = relu_backward(c2g.input, cache.relu1_in);
  auto bn1g = batchnorm_backward(grad_bn1_y, cache.bn1, model.bn1);
  g.bn1_gamma = std::move(bn1g.gamma);
  g.bn1_beta = std::move(bn1g.beta);

  const ConvSpec spec1{1, cfg.feature_filters, 3, 1, 1};
  auto c1g = conv2d_backward(bn1g.x, cache.input, model.conv1.weight, spec1);
  g.conv1_weight = std::move(c1g.weights);
  g.conv1_bias = std::move(c1g.bias);
  return g;
}

// ---------------------------------------------------------------------------
// Losses.

template <typename T>
struct LossResult {
  double value = 0.0;
  Tensor<T> grad;  // w.r.t. the first argument
};

// Mean squared error over every element (batch, channels and pixels), so the
// loss magnitude is batch-size invariant.
template <typename T>
LossResult<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  require_shape(target, pred.shape, "mse target");
  LossResult<T> r;
  r.grad = Tensor<T>(pred.shape);
  const double scale = 1.0 / static_cast<double>(pred.numel());
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double d = static_cast<double>(pred.data[i]) - static_cast<double>(target.data[i]);
    acc += d * d;
    r.grad.data[i] = static_cast<T>(2.0 * d * scale);
  }
  r.value = acc * scale;
  return r;
}

// Per-capsule hinge loss on activity-vector length, summed over capsules and
// averaged over the batch:
//   T_c max(0, 0.9 - |v_c|)^2 + lambda (1 - T_c) max(0, |v_c| - 0.1)^2
template <typename T>
LossResult<T> margin_loss(const CapsuleSet<T>& caps, const Tensor<T>& targets, double lambda) {
  require_rank(caps.activities, 3, "margin capsules");
  const std::size_t B = caps.activities.extent(0), C = caps.activities.extent(1);
  const std::size_t od = caps.activities.extent(2);
  require_shape(targets, {B, C}, "margin targets");

  LossResult<T> r;
  r.grad = Tensor<T>(caps.activities.shape);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* vp = caps.activities.data.data() + (b * C + c) * od;
      double nsq = 0.0;
      for (std::size_t k = 0; k < od; ++k) nsq += static_cast<double>(vp[k]) * vp[k];
      const double norm = std::sqrt(nsq);
      const double t = static_cast<double>(targets.at(b, c));
      const double present = std::max(0.0, 0.9 - norm);
      const double absent = std::max(0.0, norm - 0.1);
      total += t * present * present + lambda * (1.0 - t) * absent * absent;

      // d/dnorm, then d/dv = (d/dnorm) * v/norm
      double dnorm = -2.0 * t * present + 2.0 * lambda * (1.0 - t) * absent;
      dnorm /= static_cast<double>(B);
      if (norm > 1e-12) {
        for (std::size_t k = 0; k < od; ++k) {
          r.grad.data[(b * C + c) * od + k] = static_cast<T>(dnorm * vp[k] / norm);
        }
      }
    }
  }
  r.value = total / static_cast<double>(B);
  return r;
}

// ---------------------------------------------------------------------------
// Training step.

struct OptimizerConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct TrainState {
  ModelParams<float> model;
  std::vector<AdamState<float>> adam;  // aligned with named_parameters(model)
};

inline TrainState init_train_state(ModelParams<float> model, const OptimizerConfig& opt = {}) {
  TrainState st{std::move(model), {}};
  for (auto& [name, t] : named_parameters(st.model)) {
    (void)name;
    st.adam.push_back(AdamState<float>::init(t->shape, opt.lr, opt.beta1, opt.beta2, opt.eps));
  }
  return st;
}

struct StepResult {
  TrainState state;
  double loss = 0.0;
};

// One forward/loss/backward/Adam pass over a batch. The reported loss is the
// pre-update batch loss. With margin loss every capsule is treated as active
// (colorization has no class labels); only the encoder receives gradient in
// that mode.
inline StepResult train_step(const TrainState& st, const TensorF& gray, const TensorF& lab) {
  if (gray.extent(0) != lab.extent(0)) {
    throw shape_error("train_step: gray batch " + std::to_string(gray.extent(0)) +
                      " vs lab batch " + std::to_string(lab.extent(0)));
  }
  const ColorCapsNetConfig& cfg = st.model.config;
  auto fwd = forward(st.model, gray, RunMode::train);

  double loss_value;
  ModelGrads<float> grads;
  if (cfg.loss == LossKind::mse) {
    auto loss = mse_loss(fwd.lab_pred, lab);
    loss_value = loss.value;
    grads = backward(st.model, fwd.cache, loss.grad);
  } else {
    const std::size_t B = gray.extent(0);
    auto loss = margin_loss(fwd.caps, TensorF::full({B, cfg.num_output_capsules}, 1.0f),
                            cfg.margin_lambda);
    loss_value = loss.value;
    const TensorF zero_pred(fwd.lab_pred.shape);
    grads = backward(st.model, fwd.cache, zero_pred, &loss.grad);
  }

  StepResult out{TrainState{st.model, {}}, loss_value};
  out.state.model.bn1 = std::move(fwd.bn1);
  out.state.model.bn2 = std::move(fwd.bn2);
  out.state.model.caps_bn = std::move(fwd.caps_bn);

  auto params = named_parameters(out.state.model);
  auto gview = named_gradients(grads);
  out.state.adam.reserve(st.adam.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto stepped = adam_step(*params[i].second, *gview[i].second, st.adam[i]);
    *params[i].second = std::move(stepped.param);
    out.state.adam.push_back(std::move(stepped.state));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint bridging.

inline void encode_config_meta(Checkpoint& cp, const ColorCapsNetConfig& cfg) {
  cp.set_meta("config.patch_size", std::to_string(cfg.patch_size));
  cp.set_meta("config.routing_iterations", std::to_string(cfg.routing_iterations));
  cp.set_meta("config.num_output_capsules", std::to_string(cfg.num_output_capsules));
  cp.set_meta("config.output_capsule_dim", std::to_string(cfg.output_capsule_dim));
  cp.set_meta("config.primary_capsule_count", std::to_string(cfg.primary_capsule_count));
  cp.set_meta("config.primary_capsule_dim", std::to_string(cfg.primary_capsule_dim));
  cp.set_meta("config.feature_filters", std::to_string(cfg.feature_filters));
  std::string hidden;
  for (std::size_t h : cfg.decoder_hidden) {
    if (!hidden.empty()) hidden += ',';
    hidden += std::to_string(h);
  }
  cp.set_meta("config.decoder_hidden", hidden);
  cp.set_meta("config.loss", loss_name(cfg.loss));
  std::ostringstream lam;
  lam.precision(17);
  lam << cfg.margin_lambda;
  cp.set_meta("config.margin_lambda", lam.str());
}

inline ColorCapsNetConfig decode_config_meta(const Checkpoint& cp) {
  auto get = [&cp](const char* key) -> const std::string& {
    const std::string* v = cp.meta(key);
    if (!v) throw io_error(std::string("checkpoint metadata missing '") + key + "'");
    return *v;
  };
  ColorCapsNetConfig cfg;
  cfg.patch_size = std::stoull(get("config.patch_size"));
  cfg.routing_iterations = std::stoull(get("config.routing_iterations"));
  cfg.num_output_capsules = std::stoull(get("config.num_output_capsules"));
  cfg.output_capsule_dim = std::stoull(get("config.output_capsule_dim"));
  cfg.primary_capsule_count = std::stoull(get("config.primary_capsule_count"));
  cfg.primary_capsule_dim = std::stoull(get("config.primary_capsule_dim"));
  cfg.feature_filters = std::stoull(get("config.feature_filters"));
  cfg.decoder_hidden.clear();
  std::istringstream hs(get("config.decoder_hidden"));
  std::string tok;
  while (std::getline(hs, tok, ',')) {
    if (!tok.empty()) cfg.decoder_hidden.push_back(std::stoull(tok));
  }
  cfg.loss = loss_from_name(get("config.loss"));
  cfg.margin_lambda = std::stod(get("config.margin_lambda"));
  cfg.validate();
  return cfg;
}

// Model parameters + BN running statistics + optimizer moments, one flat
// dotted-name namespace, so training resumes exactly.
inline Checkpoint train_state_to_checkpoint(const TrainState& st) {
  Checkpoint cp;
  auto& model = const_cast<ModelParams<float>&>(st.model);
  for (auto& [name, t] : named_state(model)) cp.add(name, *t);
  auto params = named_parameters(model);
  for (std::size_t i = 0; i < params.size(); ++i) {
    cp.add("adam." + params[i].first + ".m", st.adam[i].m);
    cp.add("adam." + params[i].first + ".v", st.adam[i].v);
  }
  encode_config_meta(cp, st.model.config);
  cp.set_meta("adam.t", std::to_string(st.adam.empty() ? 0 : st.adam.front().t));
  return cp;
}

inline Checkpoint model_to_checkpoint(const ModelParams<float>& model) {
  Checkpoint cp;
  auto& m = const_cast<ModelParams<float>&>(model);
  for (auto& [name, t] : named_state(m)) cp.add(name, *t);
  encode_config_meta(cp, model.config);
  return cp;
}

inline ModelParams<float> model_from_checkpoint(const Checkpoint& cp) {
  ModelParams<float> m = model_skeleton(decode_config_meta(cp));
  for (auto& [name, t] : named_state(m)) {
    const Checkpoint::Entry* e = cp.find(name);
    if (!e) throw io_error("checkpoint missing model tensor '" + name + "'");
    if (e->shape != t->shape) {
      throw io_error("checkpoint tensor '" + name + "' has shape " + shape_str(e->shape) +
                     ", model expects " + shape_str(t->shape));
    }
    t->data = e->data;
  }
  return m;
}

inline TrainState train_state_from_checkpoint(const Checkpoint& cp,
                                              const OptimizerConfig& opt = {}) {
  TrainState st = init_train_state(model_from_checkpoint(cp), opt);
  std::int64_t t = 0;
  if (const std::string* ts = cp.meta("adam.t")) t = std::stoll(*ts);
  auto params = named_parameters(st.model);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Checkpoint::Entry* m = cp.find("adam." + params[i].first + ".m");
    const Checkpoint::Entry* v = cp.find("adam." + params[i].first + ".v");
    if (m && v) {
      st.adam[i].m = TensorF(m->shape, m->data);
      st.adam[i].v = TensorF(v->shape, v->data);
      st.adam[i].t = t;
    }
  }
  return st;
}

}  // namespace colorcaps
