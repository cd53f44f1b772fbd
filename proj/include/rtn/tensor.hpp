#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rtn {

// Dense row-major n-d array with value semantics. Hot loops work on raw
// pointers; the indexed accessors are for tests and glue code.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(count(shape_)), T(0));
  }

  Tensor(std::vector<int64_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != static_cast<int64_t>(data_.size()))
      throw std::invalid_argument("tensor: shape/data size mismatch");
  }

  static Tensor full(std::vector<int64_t> shape, T v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }

  static int64_t count(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      if (d < 0) throw std::invalid_argument("tensor: negative dim");
      n *= d;
    }
    return n;
  }

  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  const std::vector<int64_t>& shape() const { return shape_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  T& at(int64_t i, int64_t j) { return data_[size_t(i * dim(1) + j)]; }
  const T& at(int64_t i, int64_t j) const { return data_[size_t(i * dim(1) + j)]; }
  T& at(int64_t i, int64_t j, int64_t k) {
    return data_[size_t((i * dim(1) + j) * dim(2) + k)];
  }
  const T& at(int64_t i, int64_t j, int64_t k) const {
    return data_[size_t((i * dim(1) + j) * dim(2) + k)];
  }
  T& at(int64_t i, int64_t j, int64_t k, int64_t l) {
    return data_[size_t(((i * dim(1) + j) * dim(2) + k) * dim(3) + l)];
  }
  const T& at(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return data_[size_t(((i * dim(1) + j) * dim(2) + k) * dim(3) + l)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  // Same storage under a new shape (element count must match).
  Tensor reshaped(std::vector<int64_t> s) const {
    if (count(s) != size()) throw std::invalid_argument("tensor: reshape count mismatch");
    return Tensor(std::move(s), data_);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
  }

 private:
  std::vector<int64_t> shape_;
  std::vector<T> data_;
};

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& a) {
  std::vector<To> out(static_cast<size_t>(a.size()));
  for (int64_t i = 0; i < a.size(); ++i) out[size_t(i)] = static_cast<To>(a[i]);
  return Tensor<To>(a.shape(), std::move(out));
}

template <class T>
bool all_finite(const Tensor<T>& a) {
  for (int64_t i = 0; i < a.size(); ++i)
    if (!std::isfinite(double(a[i]))) return false;
  return true;
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0;
  for (int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace rtn
