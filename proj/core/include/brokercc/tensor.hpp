#pragma once

#include <cassert>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace brokercc {

/// Dense row-major tensor. Rank is dynamic; layouts used across the
/// project are (C,H,W) for images/features, (N,D) for token sequences,
/// (Cout,Cin,kh,kw) for conv kernels.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> dims, T fill = T(0)) : dims_(std::move(dims)) {
    data_.assign(static_cast<size_t>(count(dims_)), fill);
  }

  static Tensor from(std::vector<int> dims, std::vector<T> data) {
    Tensor t;
    if (count(dims) != static_cast<std::int64_t>(data.size()))
      throw std::invalid_argument("Tensor::from: shape/data size mismatch");
    t.dims_ = std::move(dims);
    t.data_ = std::move(data);
    return t;
  }

  int rank() const { return static_cast<int>(dims_.size()); }
  int dim(int i) const { return dims_[static_cast<size_t>(i)]; }
  const std::vector<int>& dims() const { return dims_; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

  /// 3D accessor for (C,H,W) tensors.
  T& at(int c, int y, int x) {
    return data_[static_cast<size_t>((static_cast<std::int64_t>(c) * dims_[1] + y) * dims_[2] + x)];
  }
  const T& at(int c, int y, int x) const {
    return data_[static_cast<size_t>((static_cast<std::int64_t>(c) * dims_[1] + y) * dims_[2] + x)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    std::vector<U> d(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) d[i] = static_cast<U>(data_[i]);
    out = Tensor<U>::from(dims_, std::move(d));
    return out;
  }

  static std::int64_t count(const std::vector<int>& dims) {
    std::int64_t n = 1;
    for (int d : dims) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  static std::string shape_str(const std::vector<int>& dims) {
    std::string s = "(";
    for (size_t i = 0; i < dims.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(dims[i]);
    }
    return s + ")";
  }

 private:
  std::vector<int> dims_;
  std::vector<T> data_;
};

}  // namespace brokercc
