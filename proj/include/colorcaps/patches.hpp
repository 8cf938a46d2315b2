#pragma once

#include <algorithm>
#include <cstddef>
#include <string>

#include "colorcaps/tensor.hpp"

namespace colorcaps {

// Non-overlapping n-by-n tiling of a [C,H,W] image, with mirror padding on the
// bottom/right edges when H or W is not a multiple of n. Patch order is
// row-major and stable: patch index = row*cols + col.

struct PatchGrid {
  std::size_t original_height = 0;
  std::size_t original_width = 0;
  std::size_t n = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t pad_bottom = 0;
  std::size_t pad_right = 0;
};

namespace detail {

// Mirror without repeating the border pixel (period 2*(extent-1)); an extent
// of 1 degenerates to clamping.
inline std::size_t mirror_index(std::size_t i, std::size_t extent) {
  if (i < extent) return i;
  if (extent == 1) return 0;
  const std::size_t period = 2 * (extent - 1);
  const std::size_t m = i % period;
  return m < extent ? m : period - m;
}

}  // namespace detail

template <typename T>
struct SliceResult {
  Tensor<T> patches;  // [rows*cols, C, n, n]
  PatchGrid grid;
};

template <typename T>
SliceResult<T> slice_patches(const Tensor<T>& image, std::size_t n) {
  require_rank(image, 3, "slice input");
  const std::size_t C = image.extent(0), H = image.extent(1), W = image.extent(2);
  if (n < 1) throw domain_error("patch size must be >= 1");
  if (n > 2 * std::min(H, W)) {
    throw domain_error("patch size " + std::to_string(n) + " cannot be mirror-padded from a " +
                       std::to_string(H) + "x" + std::to_string(W) + " image");
  }

  PatchGrid grid;
  grid.original_height = H;
  grid.original_width = W;
  grid.n = n;
  grid.pad_bottom = (n - H % n) % n;
  grid.pad_right = (n - W % n) % n;
  grid.rows = (H + grid.pad_bottom) / n;
  grid.cols = (W + grid.pad_right) / n;

  SliceResult<T> r{Tensor<T>({grid.rows * grid.cols, C, n, n}), grid};
  for (std::size_t row = 0; row < grid.rows; ++row) {
    for (std::size_t col = 0; col < grid.cols; ++col) {
      const std::size_t patch = row * grid.cols + col;
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < n; ++y) {
          const std::size_t sy = detail::mirror_index(row * n + y, H);
          for (std::size_t x = 0; x < n; ++x) {
            const std::size_t sx = detail::mirror_index(col * n + x, W);
            r.patches.at(patch, c, y, x) = image.at(c, sy, sx);
          }
        }
      }
    }
  }
  return r;
}

template <typename T>
Tensor<T> reassemble_patches(const Tensor<T>& patches, const PatchGrid& grid) {
  require_rank(patches, 4, "reassemble input");
  if (patches.extent(0) != grid.rows * grid.cols) {
    throw shape_error("reassemble: got " + std::to_string(patches.extent(0)) +
                      " patches, grid needs " + std::to_string(grid.rows * grid.cols));
  }
  if (patches.extent(2) != grid.n || patches.extent(3) != grid.n) {
    throw shape_error("reassemble: patch extent " + shape_str(patches.shape) +
                      " does not match grid n=" + std::to_string(grid.n));
  }
  const std::size_t C = patches.extent(1);
  const std::size_t H = grid.original_height, W = grid.original_width;

  Tensor<T> image({C, H, W});
  for (std::size_t row = 0; row < grid.rows; ++row) {
    for (std::size_t col = 0; col < grid.cols; ++col) {
      const std::size_t patch = row * grid.cols + col;
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < grid.n; ++y) {
          const std::size_t iy = row * grid.n + y;
          if (iy >= H) continue;
          for (std::size_t x = 0; x < grid.n; ++x) {
            const std::size_t ix = col * grid.n + x;
            if (ix >= W) continue;
            image.at(c, iy, ix) = patches.at(patch, c, y, x);
          }
        }
      }
    }
  }
  return image;
}

}  // namespace colorcaps
