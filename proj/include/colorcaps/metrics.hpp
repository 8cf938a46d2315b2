#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "colorcaps/tensor.hpp"

namespace colorcaps {

// PSNR / SSIM between 8-bit [C,H,W] images. All statistics in 64-bit.

struct QualityReport {
  double psnr = 0.0;  // dB, +infinity for identical images
  double ssim = 0.0;
};

inline double psnr(const ImageU8& ref, const ImageU8& est) {
  require_shape(est, ref.shape, "psnr estimate");
  double se = 0.0;
  for (std::size_t i = 0; i < ref.numel(); ++i) {
    const double d = static_cast<double>(ref.data[i]) - static_cast<double>(est.data[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(ref.numel());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

namespace detail {

constexpr std::size_t kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimC1 = (0.01 * 255.0) * (0.01 * 255.0);
constexpr double kSsimC2 = (0.03 * 255.0) * (0.03 * 255.0);

inline std::vector<double> ssim_kernel_1d() {
  std::vector<double> k(kSsimWindow);
  const double half = (kSsimWindow - 1) / 2.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < kSsimWindow; ++i) {
    const double d = static_cast<double>(i) - half;
    k[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

inline double ssim_term(double mu1, double mu2, double var1, double var2, double cov) {
  return ((2.0 * mu1 * mu2 + kSsimC1) * (2.0 * cov + kSsimC2)) /
         ((mu1 * mu1 + mu2 * mu2 + kSsimC1) * (var1 + var2 + kSsimC2));
}

// Gaussian-weighted windowed means of a plane, separable passes, valid
// positions only. Output is (H-10) x (W-10).
inline std::vector<double> windowed_mean(const std::vector<double>& plane, std::size_t h,
                                         std::size_t w, const std::vector<double>& kernel) {
  const std::size_t wo = w - kSsimWindow + 1;
  const std::size_t ho = h - kSsimWindow + 1;
  std::vector<double> horiz(h * wo), out(ho * wo);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (std::size_t k = 0; k < kSsimWindow; ++k) acc += kernel[k] * plane[y * w + x + k];
      horiz[y * wo + x] = acc;
    }
  }
  for (std::size_t y = 0; y < ho; ++y) {
    for (std::size_t x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (std::size_t k = 0; k < kSsimWindow; ++k) acc += kernel[k] * horiz[(y + k) * wo + x];
      out[y * wo + x] = acc;
    }
  }
  return out;
}

}  // namespace detail

// Mean SSIM over sliding 11x11 Gaussian windows (sigma 1.5), computed per
// channel and averaged over channels.
inline double ssim(const ImageU8& ref, const ImageU8& est) {
  require_rank(ref, 3, "ssim reference");
  require_shape(est, ref.shape, "ssim estimate");
  const std::size_t C = ref.extent(0), H = ref.extent(1), W = ref.extent(2);
  if (H < detail::kSsimWindow || W < detail::kSsimWindow) {
    throw shape_error("ssim needs images at least 11x11, got " + shape_str(ref.shape));
  }
  const std::vector<double> kernel = detail::ssim_kernel_1d();
  const std::size_t plane = H * W;

  double channel_sum = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> a(plane), b(plane), aa(plane), bb(plane), ab(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      a[i] = static_cast<double>(ref.data[c * plane + i]);
      b[i] = static_cast<double>(est.data[c * plane + i]);
      aa[i] = a[i] * a[i];
      bb[i] = b[i] * b[i];
      ab[i] = a[i] * b[i];
    }
    const auto mu1 = detail::windowed_mean(a, H, W, kernel);
    const auto mu2 = detail::windowed_mean(b, H, W, kernel);
    const auto m11 = detail::windowed_mean(aa, H, W, kernel);
    const auto m22 = detail::windowed_mean(bb, H, W, kernel);
    const auto m12 = detail::windowed_mean(ab, H, W, kernel);

    double acc = 0.0;
    for (std::size_t i = 0; i < mu1.size(); ++i) {
      const double var1 = m11[i] - mu1[i] * mu1[i];
      const double var2 = m22[i] - mu2[i] * mu2[i];
      const double cov = m12[i] - mu1[i] * mu2[i];
      acc += detail::ssim_term(mu1[i], mu2[i], var1, var2, cov);
    }
    channel_sum += acc / static_cast<double>(mu1.size());
  }
  return channel_sum / static_cast<double>(C);
}

// Single-statistic SSIM over the whole image (one "window" spanning every
// pixel of a channel). Degenerate as a full-image score; kept as the direct
// reading of the formula and reported alongside the windowed score in
// verbose evaluation output.
inline double ssim_global(const ImageU8& ref, const ImageU8& est) {
  require_rank(ref, 3, "ssim reference");
  require_shape(est, ref.shape, "ssim estimate");
  const std::size_t C = ref.extent(0), plane = ref.extent(1) * ref.extent(2);

  double channel_sum = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    double s1 = 0, s2 = 0, s11 = 0, s22 = 0, s12 = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      const double a = static_cast<double>(ref.data[c * plane + i]);
      const double b = static_cast<double>(est.data[c * plane + i]);
      s1 += a;
      s2 += b;
      s11 += a * a;
      s22 += b * b;
      s12 += a * b;
    }
    const double m = static_cast<double>(plane);
    const double mu1 = s1 / m, mu2 = s2 / m;
    channel_sum += detail::ssim_term(mu1, mu2, s11 / m - mu1 * mu1, s22 / m - mu2 * mu2,
                                     s12 / m - mu1 * mu2);
  }
  return channel_sum / static_cast<double>(C);
}

}  // namespace colorcaps
