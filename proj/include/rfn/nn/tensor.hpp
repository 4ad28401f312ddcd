#pragma once

// Dense row-major n-d array. Feature maps use (channels, height, width);
// matrices use (rows, cols).

#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace rfn::nn {

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> dims) : dims_(std::move(dims)) {
    data_.assign(count(dims_), T(0));
  }
  Tensor(std::vector<int> dims, T fill) : dims_(std::move(dims)) {
    data_.assign(count(dims_), fill);
  }

  static Tensor zeros(std::vector<int> dims) { return Tensor(std::move(dims)); }
  static Tensor full(std::vector<int> dims, T v) { return Tensor(std::move(dims), v); }
  static Tensor scalar(T v) { return Tensor({1}, v); }

  const std::vector<int>& dims() const { return dims_; }
  int dim(int i) const { return dims_[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(dims_.size()); }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }

  // (c,h,w) accessors
  T& at(int c, int y, int x) {
    return data_[(static_cast<size_t>(c) * dims_[1] + y) * dims_[2] + x];
  }
  const T& at(int c, int y, int x) const {
    return data_[(static_cast<size_t>(c) * dims_[1] + y) * dims_[2] + x];
  }
  // (rows,cols) accessors
  T& at(int r, int c) { return data_[static_cast<size_t>(r) * dims_[1] + c]; }
  const T& at(int r, int c) const { return data_[static_cast<size_t>(r) * dims_[1] + c]; }

  bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  T sum() const {
    T s = 0;
    for (T v : data_) s += v;
    return s;
  }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(dims_);
    for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < dims_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(dims_[i]);
    }
    return s + ")";
  }

  static size_t count(const std::vector<int>& dims) {
    size_t n = 1;
    for (int d : dims) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dim");
      n *= static_cast<size_t>(d);
    }
    return dims.empty() ? 0 : n;
  }

 private:
  std::vector<int> dims_;
  std::vector<T> data_;
};

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
}

template <typename T, typename Rng>
inline Tensor<T> randn(std::vector<int> dims, Rng& rng, T stddev) {
  Tensor<T> t(std::move(dims));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng) * stddev);
  return t;
}

}  // namespace rfn::nn
