#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "colorcaps/metrics.hpp"
#include "colorcaps/rng.hpp"

using namespace colorcaps;

namespace {

ImageU8 random_image(Shape shape, Rng& rng) {
  ImageU8 img(std::move(shape));
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

// Direct non-separable SSIM oracle: explicit 2-D Gaussian window, every sum
// recomputed from the definition at each valid window position.
double naive_ssim(const ImageU8& ref, const ImageU8& est) {
  const std::size_t C = ref.extent(0), H = ref.extent(1), W = ref.extent(2);
  const double C1 = 6.5025, C2 = 58.5225;  // (0.01*255)^2, (0.03*255)^2

  double kernel[11][11];
  double ksum = 0.0;
  for (int i = 0; i < 11; ++i) {
    for (int j = 0; j < 11; ++j) {
      const double dy = i - 5.0, dx = j - 5.0;
      kernel[i][j] = std::exp(-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5));
      ksum += kernel[i][j];
    }
  }
  for (auto& row : kernel) {
    for (double& v : row) v /= ksum;
  }

  double channel_acc = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    double acc = 0.0;
    std::size_t windows = 0;
    for (std::size_t y = 0; y + 11 <= H; ++y) {
      for (std::size_t x = 0; x + 11 <= W; ++x) {
        double m1 = 0, m2 = 0, m11 = 0, m22 = 0, m12 = 0;
        for (int i = 0; i < 11; ++i) {
          for (int j = 0; j < 11; ++j) {
            const double a = ref.at(c, y + i, x + j);
            const double b = est.at(c, y + i, x + j);
            const double w = kernel[i][j];
            m1 += w * a;
            m2 += w * b;
            m11 += w * a * a;
            m22 += w * b * b;
            m12 += w * a * b;
          }
        }
        const double var1 = m11 - m1 * m1, var2 = m22 - m2 * m2, cov = m12 - m1 * m2;
        acc += ((2 * m1 * m2 + C1) * (2 * cov + C2)) /
               ((m1 * m1 + m2 * m2 + C1) * (var1 + var2 + C2));
        ++windows;
      }
    }
    channel_acc += acc / static_cast<double>(windows);
  }
  return channel_acc / static_cast<double>(C);
}

}  // namespace

TEST(Psnr, IdenticalImagesAreInfinite) {
  Rng rng(501);
  const ImageU8 img = random_image({3, 16, 16}, rng);
  EXPECT_TRUE(std::isinf(psnr(img, img)));
}

TEST(Psnr, FullScaleErrorIsZeroDb) {
  const ImageU8 black = ImageU8::zeros({3, 8, 8});
  const ImageU8 white = ImageU8::full({3, 8, 8}, 255);
  EXPECT_EQ(psnr(black, white), 0.0);
}

TEST(Psnr, UnitMseAnchor) {
  // every pixel off by exactly 1 -> MSE = 1 -> 10 log10(255^2)
  const ImageU8 a = ImageU8::full({1, 12, 12}, 100);
  const ImageU8 b = ImageU8::full({1, 12, 12}, 101);
  EXPECT_DOUBLE_EQ(psnr(a, b), 10.0 * std::log10(65025.0));
  EXPECT_NEAR(psnr(a, b), 48.131, 1e-3);
}

TEST(Psnr, DimensionMismatchThrows) {
  const ImageU8 a({1, 12, 12}), b({1, 12, 13});
  EXPECT_THROW(psnr(a, b), shape_error);
}

TEST(Psnr, StrictlyDecreasesWithGrowingMse) {
  const ImageU8 ref = ImageU8::full({1, 16, 16}, 120);
  double prev = std::numeric_limits<double>::infinity();
  for (int delta = 1; delta <= 60; delta += 7) {
    const ImageU8 est = ImageU8::full({1, 16, 16}, static_cast<std::uint8_t>(120 + delta));
    const double p = psnr(ref, est);
    EXPECT_LT(p, prev);
    prev = p;
  }
}

TEST(Ssim, IdenticalImagesScoreOne) {
  Rng rng(503);
  const ImageU8 img = random_image({3, 24, 24}, rng);
  EXPECT_NEAR(ssim(img, img), 1.0, 1e-9);
  EXPECT_NEAR(ssim_global(img, img), 1.0, 1e-9);
}

TEST(Ssim, ConstantZeroVsConstantFull) {
  const ImageU8 black = ImageU8::zeros({1, 16, 16});
  const ImageU8 white = ImageU8::full({1, 16, 16}, 255);
  const double want = 6.5025 / (65025.0 + 6.5025);  // C1 / (255^2 + C1)
  EXPECT_NEAR(ssim(black, white), want, 1e-12);
  EXPECT_NEAR(want, 1.0e-4, 2e-6);
}

TEST(Ssim, MatchesNaiveWindowedOracle) {
  Rng rng(509);
  for (int i = 0; i < 10; ++i) {
    const ImageU8 a = random_image({3, 32, 32}, rng);
    const ImageU8 b = random_image({3, 32, 32}, rng);
    EXPECT_NEAR(ssim(a, b), naive_ssim(a, b), 1e-6);
  }
}

TEST(Ssim, Symmetric) {
  Rng rng(521);
  for (int i = 0; i < 5; ++i) {
    const ImageU8 a = random_image({3, 20, 20}, rng);
    const ImageU8 b = random_image({3, 20, 20}, rng);
    EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-9);
  }
}

TEST(Ssim, RejectsImagesSmallerThanWindow) {
  const ImageU8 small({1, 10, 16});
  EXPECT_THROW(ssim(small, small), shape_error);
}
