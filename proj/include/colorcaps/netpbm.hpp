#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "colorcaps/tensor.hpp"

namespace colorcaps {

// Binary netpbm: P5 (grayscale) and P6 (RGB), 8-bit, maxval 255. The reader
// accepts arbitrary header whitespace and '#' comments; the writer emits a
// fixed single-whitespace header with no comments, so files it produced read
// back byte-for-byte.

namespace detail {

inline int pnm_token(std::istream& in, const std::string& path) {
  int c = in.get();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    }
    c = in.get();
  }
  if (c == EOF || !std::isdigit(c)) {
    throw io_error(path + ": malformed netpbm header");
  }
  long value = 0;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    if (value > 1000000000L) throw io_error(path + ": absurd netpbm header value");
    c = in.get();
  }
  if (c != EOF) in.unget();
  return static_cast<int>(value);
}

}  // namespace detail

// Reads P5 into [1,H,W], P6 into [3,H,W].
inline ImageU8 load_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error(path + ": cannot open");

  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
    throw io_error(path + ": unsupported magic number (want P5 or P6)");
  }
  const std::size_t channels = magic[1] == '6' ? 3 : 1;
  const std::size_t width = static_cast<std::size_t>(detail::pnm_token(in, path));
  const std::size_t height = static_cast<std::size_t>(detail::pnm_token(in, path));
  const int maxval = detail::pnm_token(in, path);
  if (maxval != 255) {
    throw io_error(path + ": unsupported maxval " + std::to_string(maxval) + " (want 255)");
  }
  const int sep = in.get();
  if (sep == EOF || !std::isspace(sep)) {
    throw io_error(path + ": missing whitespace before pixel data");
  }
  if (width == 0 || height == 0) throw io_error(path + ": zero image extent");

  std::vector<char> raw(width * height * channels);
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
    throw io_error(path + ": truncated pixel payload");
  }

  ImageU8 img({channels, height, width});
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        img.at(c, y, x) = static_cast<std::uint8_t>(raw[(y * width + x) * channels + c]);
      }
    }
  }
  return img;
}

inline void write_image(const std::string& path, const ImageU8& image) {
  require_rank(image, 3, "write_image");
  const std::size_t channels = image.extent(0);
  if (channels != 1 && channels != 3) {
    throw io_error(path + ": can only write 1-channel (P5) or 3-channel (P6) images");
  }
  const std::size_t height = image.extent(1), width = image.extent(2);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error(path + ": cannot open for writing");
  out << (channels == 3 ? "P6" : "P5") << "\n" << width << " " << height << "\n255\n";

  std::vector<char> raw(width * height * channels);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        raw[(y * width + x) * channels + c] = static_cast<char>(image.at(c, y, x));
      }
    }
  }
  out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!out) throw io_error(path + ": write failed");
}

}  // namespace colorcaps
