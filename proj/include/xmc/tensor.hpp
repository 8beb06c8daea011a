#pragma once

// Dense row-major double tensor. Rank 1 and 2 cover almost everything in the
// pipeline; convolution kernels are rank 3.

#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace xmc {

struct Tensor {
  std::vector<std::size_t> dims;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> d, double fill = 0.0)
      : dims(std::move(d)) {
    v.assign(count(dims), fill);
  }

  static std::size_t count(const std::vector<std::size_t>& d) {
    std::size_t n = 1;
    for (auto x : d) n *= x;
    return n;
  }

  static Tensor vec(std::vector<double> data) {
    Tensor t;
    t.dims = {data.size()};
    t.v = std::move(data);
    return t;
  }

  static Tensor matrix(std::size_t r, std::size_t c,
                       std::vector<double> data) {
    Tensor t;
    t.dims = {r, c};
    if (data.size() != r * c)
      throw std::invalid_argument("Tensor::matrix: data size mismatch");
    t.v = std::move(data);
    return t;
  }

  static Tensor scalar(double x) {
    Tensor t;
    t.dims = {1};
    t.v = {x};
    return t;
  }

  std::size_t size() const { return v.size(); }
  std::size_t rank() const { return dims.size(); }
  std::size_t rows() const { return dims.at(0); }
  std::size_t cols() const { return dims.at(1); }

  double& operator[](std::size_t i) { return v[i]; }
  double operator[](std::size_t i) const { return v[i]; }

  double& operator()(std::size_t i, std::size_t j) {
    return v[i * dims[1] + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    return v[i * dims[1] + j];
  }

  double& at3(std::size_t i, std::size_t j, std::size_t k) {
    return v[(i * dims[1] + j) * dims[2] + k];
  }
  double at3(std::size_t i, std::size_t j, std::size_t k) const {
    return v[(i * dims[1] + j) * dims[2] + k];
  }

  bool same_shape(const Tensor& o) const { return dims == o.dims; }

  void fill(double x) { std::fill(v.begin(), v.end(), x); }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < dims.size(); ++i)
      os << dims[i] << (i + 1 < dims.size() ? "x" : "");
    os << ")";
    return os.str();
  }
};

inline bool all_finite(const Tensor& t) {
  for (double x : t.v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace xmc
