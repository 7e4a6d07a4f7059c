#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "unigrid/rng.hpp"

namespace unigrid {

// Dense row-major tensor. float for training, double for gradient checking.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), T(0));
  }
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != numel_of(shape))
      throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("tensor: negative dimension in " + shape_str(s));
      n *= d;
    }
    return n;
  }

  static std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int> s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  static Tensor randn(std::vector<int> s, Rng& rng, T stddev = T(1)) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
  int rows() const { return shape.size() == 2 ? shape[0] : (shape.size() == 1 ? 1 : -1); }
  int cols() const { return shape.size() == 2 ? shape[1] : (shape.size() == 1 ? shape[0] : -1); }

  bool is_scalar() const { return numel() == 1; }
  T scalar_value() const {
    if (!is_scalar()) throw std::invalid_argument("tensor: not a scalar, shape " + shape_str(shape));
    return data[0];
  }

  T& at(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
  T at(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }
  T* row_ptr(int r) { return data.data() + static_cast<size_t>(r) * shape[1]; }
  const T* row_ptr(int r) const { return data.data() + static_cast<size_t>(r) * shape[1]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  T l2_norm() const {
    double s = 0;
    for (T v : data) s += static_cast<double>(v) * static_cast<double>(v);
    return static_cast<T>(std::sqrt(s));
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace unigrid
