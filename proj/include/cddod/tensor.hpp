#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cddod {

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

using Shape = std::vector<int>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

/// Dense n-dimensional array of 64-bit floats, row-major.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)) {
    for (int d : shape) check(d > 0, "Tensor: dimensions must be positive, got " + shape_str(shape));
    data.assign(static_cast<size_t>(numel_of(shape)), fill);
  }
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    check(static_cast<int64_t>(data.size()) == numel_of(shape),
          "Tensor: data size " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }
  static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // NCHW accessor
  double& at4(int n, int c, int h, int w) {
    return data[static_cast<size_t>(((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }
  double at4(int n, int c, int h, int w) const {
    return data[static_cast<size_t>(((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }
  double& at2(int r, int c) { return data[static_cast<size_t>(static_cast<int64_t>(r) * shape[1] + c)]; }
  double at2(int r, int c) const { return data[static_cast<size_t>(static_cast<int64_t>(r) * shape[1] + c)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

}  // namespace cddod
