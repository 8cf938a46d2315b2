#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "colorcaps/common.hpp"

namespace colorcaps {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense N-dimensional array, flat row-major storage.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), T{}) {
    for (std::size_t e : shape) {
      if (e == 0) throw shape_error("tensor extent must be positive, got shape " + shape_str(shape));
    }
  }

  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != data.size()) {
      throw shape_error("tensor data size " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    }
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

  static Tensor full(Shape s, T value) {
    Tensor t(std::move(s));
    for (T& x : t.data) x = value;
    return t;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t extent(std::size_t axis) const { return shape.at(axis); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  template <typename... Ix>
  T& at(Ix... ix) {
    return data[offset_of({static_cast<std::size_t>(ix)...})];
  }
  template <typename... Ix>
  const T& at(Ix... ix) const {
    return data[offset_of({static_cast<std::size_t>(ix)...})];
  }

  std::size_t offset_of(std::initializer_list<std::size_t> ix) const {
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : ix) {
      off = off * shape[axis] + i;
      ++axis;
    }
    return off;
  }

  // Same data, new shape; element count must agree.
  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != data.size()) {
      throw shape_error("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
    }
    return Tensor(std::move(s), data);
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  bool all_finite() const {
    for (T x : data) {
      if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.data == b.data;
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using ImageU8 = Tensor<std::uint8_t>;

template <typename T>
void require_shape(const Tensor<T>& t, const Shape& expected, const char* what) {
  if (t.shape != expected) {
    throw shape_error(std::string(what) + ": expected shape " + shape_str(expected) +
                      ", got " + shape_str(t.shape));
  }
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw shape_error(std::string(what) + ": expected rank " + std::to_string(rank) +
                      ", got shape " + shape_str(t.shape));
  }
}

}  // namespace colorcaps
