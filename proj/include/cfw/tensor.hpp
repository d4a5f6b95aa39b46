#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cfw/common.hpp"

namespace cfw {

/// Dense row-major tensor. `S` is the storage scalar; the network runs in float.
template <class S = float>
struct Tensor {
  using value_type = S;

  std::vector<std::size_t> shape;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shp, S fill = S(0))
      : shape(std::move(shp)), data(element_count(shape), fill) {}
  Tensor(std::vector<std::size_t> shp, std::vector<S> values) : shape(std::move(shp)), data(std::move(values)) {
    if (data.size() != element_count(shape))
      fail(ErrorKind::ShapeMismatch, "data length " + std::to_string(data.size()) + " != shape product " +
                                         std::to_string(element_count(shape)));
  }

  static std::size_t element_count(const std::vector<std::size_t>& shp) {
    return std::accumulate(shp.begin(), shp.end(), std::size_t{1}, std::multiplies<>{});
  }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  S* ptr() noexcept { return data.data(); }
  const S* ptr() const noexcept { return data.data(); }
  std::span<S> span() noexcept { return data; }
  std::span<const S> span() const noexcept { return data; }

  S& operator[](std::size_t i) noexcept { return data[i]; }
  const S& operator[](std::size_t i) const noexcept { return data[i]; }

  void fill(S v) { std::fill(data.begin(), data.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

inline std::string shape_string(const std::vector<std::size_t>& shp) {
  std::string s = "[";
  for (std::size_t i = 0; i < shp.size(); ++i) s += (i ? "x" : "") + std::to_string(shp[i]);
  return s + "]";
}

template <class S>
void expect_shape(const Tensor<S>& t, const std::vector<std::size_t>& shp, const char* what) {
  if (t.shape != shp)
    fail(ErrorKind::ShapeMismatch, std::string(what) + ": expected " + shape_string(shp) + ", got " +
                                       shape_string(t.shape));
}

}  // namespace cfw
