#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>

namespace colorcaps {

// sRGB <-> CIE Lab, D65 reference white, 2-degree observer.

struct RgbPixel {
  std::uint8_t r = 0;
  std::uint8_t g = 0;
  std::uint8_t b = 0;
};

struct LabPixel {
  double L = 0.0;  // [0, 100]
  double a = 0.0;  // [-128, 127]
  double b = 0.0;  // [-128, 127]
};

namespace detail {

constexpr double kXn = 0.95047;
constexpr double kYn = 1.0;
constexpr double kZn = 1.08883;
constexpr double kLabDelta = 6.0 / 29.0;

inline double srgb_to_linear(double c) {
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

inline double linear_to_srgb(double c) {
  return c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
}

inline double lab_f(double t) {
  constexpr double cube = kLabDelta * kLabDelta * kLabDelta;
  return t > cube ? std::cbrt(t) : t / (3.0 * kLabDelta * kLabDelta) + 4.0 / 29.0;
}

inline double lab_f_inv(double f) {
  return f > kLabDelta ? f * f * f : 3.0 * kLabDelta * kLabDelta * (f - 4.0 / 29.0);
}

inline std::uint8_t quantize(double c) {  // c in [0,1], round half up
  const double clamped = std::clamp(c, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::floor(clamped * 255.0 + 0.5));
}

}  // namespace detail

inline LabPixel rgb_to_lab(const RgbPixel& p) {
  const double r = detail::srgb_to_linear(p.r / 255.0);
  const double g = detail::srgb_to_linear(p.g / 255.0);
  const double b = detail::srgb_to_linear(p.b / 255.0);

  const double x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
  const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
  const double z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;

  const double fx = detail::lab_f(x / detail::kXn);
  const double fy = detail::lab_f(y / detail::kYn);
  const double fz = detail::lab_f(z / detail::kZn);

  LabPixel lab;
  lab.L = std::clamp(116.0 * fy - 16.0, 0.0, 100.0);
  lab.a = std::clamp(500.0 * (fx - fy), -128.0, 127.0);
  lab.b = std::clamp(200.0 * (fy - fz), -128.0, 127.0);
  return lab;
}

// Algebraic inverse of rgb_to_lab. Out-of-gamut values are clamped in the
// linear domain (equivalent to clamping after gamma encoding, and keeps the
// gamma curve away from negative arguments) before 8-bit quantization.
inline RgbPixel lab_to_rgb(const LabPixel& p) {
  const double fy = (p.L + 16.0) / 116.0;
  const double fx = fy + p.a / 500.0;
  const double fz = fy - p.b / 200.0;

  const double x = detail::kXn * detail::lab_f_inv(fx);
  const double y = detail::kYn * detail::lab_f_inv(fy);
  const double z = detail::kZn * detail::lab_f_inv(fz);

  double r = 3.2404542 * x - 1.5371385 * y - 0.4985314 * z;
  double g = -0.9692660 * x + 1.8760108 * y + 0.0415560 * z;
  double b = 0.0556434 * x - 0.2040259 * y + 1.0572252 * z;

  r = detail::linear_to_srgb(std::clamp(r, 0.0, 1.0));
  g = detail::linear_to_srgb(std::clamp(g, 0.0, 1.0));
  b = detail::linear_to_srgb(std::clamp(b, 0.0, 1.0));

  return RgbPixel{detail::quantize(r), detail::quantize(g), detail::quantize(b)};
}

// Affine map from Lab units onto [0,1]^3, the network's value range.
inline std::array<double, 3> normalize_lab(const LabPixel& p) {
  return {p.L / 100.0, (p.a + 128.0) / 255.0, (p.b + 128.0) / 255.0};
}

inline LabPixel denormalize_lab(double l, double a, double b) {
  return LabPixel{l * 100.0, a * 255.0 - 128.0, b * 255.0 - 128.0};
}

}  // namespace colorcaps
