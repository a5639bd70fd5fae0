#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "cwat/error.hpp"

namespace cwat {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

/// Dense row-major f64 array.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(numel(shape), fill) {}
  Tensor(Shape s, std::vector<double> values)
      : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != numel(shape)) {
      fail(ErrorCategory::shape, "tensor payload of " +
                                     std::to_string(data.size()) +
                                     " values does not fit shape " +
                                     to_string(shape));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }

  std::size_t size() const { return data.size(); }
  double item() const { return data.at(0); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

}  // namespace cwat
