#pragma once

#include <algorithm>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "curlip/errors.hpp"
#include "curlip/rng.hpp"

namespace curlip {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major numeric array. float for training, double for gradient
// verification; everything downstream is templated on the scalar type.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape();
    data_.assign((size_t)shape_numel(shape_), T(0));
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if ((int64_t)data_.size() != shape_numel(shape_))
      throw ShapeMismatch("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_str(shape_));
  }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, double sigma = 1.0, double mu = 0.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = (T)rng.normal(mu, sigma);
    return t;
  }
  static Tensor rand_uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = (T)rng.uniform(lo, hi);
    return t;
  }

  // True only for a default-constructed tensor (used as the "no gradient yet"
  // sentinel inside the tape).
  bool empty() const { return shape_.empty() && data_.empty(); }

  const Shape& shape() const { return shape_; }
  int64_t dim(int i) const { return shape_[(size_t)i]; }
  int rank() const { return (int)shape_.size(); }
  int64_t numel() const { return (int64_t)data_.size(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& at(int64_t i) { return data_[(size_t)i]; }
  T at(int64_t i) const { return data_[(size_t)i]; }

  T& operator()(int64_t i, int64_t j) { return data_[(size_t)(i * shape_[1] + j)]; }
  T operator()(int64_t i, int64_t j) const { return data_[(size_t)(i * shape_[1] + j)]; }
  T& operator()(int64_t i, int64_t j, int64_t k) {
    return data_[(size_t)((i * shape_[1] + j) * shape_[2] + k)];
  }
  T operator()(int64_t i, int64_t j, int64_t k) const {
    return data_[(size_t)((i * shape_[1] + j) * shape_[2] + k)];
  }
  T& operator()(int64_t i, int64_t j, int64_t k, int64_t l) {
    return data_[(size_t)(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }
  T operator()(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return data_[(size_t)(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw ShapeMismatch("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  void add_(const Tensor& o) {
    if (!same_shape(o))
      throw ShapeMismatch("add_: shape " + shape_str(shape_) + " vs " + shape_str(o.shape_));
    for (int64_t i = 0; i < numel(); ++i) data_[(size_t)i] += o.data_[(size_t)i];
  }

 private:
  void check_shape() const {
    for (int64_t d : shape_)
      if (d < 1) throw ShapeMismatch("tensor dims must be >= 1, got " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& x) {
  std::vector<To> d(x.vec().size());
  for (size_t i = 0; i < d.size(); ++i) d[i] = (To)x.vec()[i];
  return Tensor<To>(x.shape(), std::move(d));
}

}  // namespace curlip
