#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace isoscan {

// Dense row-major N-d array of doubles. Shapes are small and fixed per use
// site, so this stays deliberately minimal: storage, indexing, a few
// constructors. All numeric operations live with their operators.
class NdArray {
public:
  NdArray() = default;

  explicit NdArray(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(checked_numel(shape_), 0.0);
  }

  NdArray(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_numel(shape_))
      throw std::invalid_argument("NdArray: data length does not match shape");
  }

  static NdArray zeros(std::vector<int> shape) { return NdArray(std::move(shape)); }

  static NdArray full(std::vector<int> shape, double value) {
    NdArray a(std::move(shape));
    a.data_.assign(a.data_.size(), value);
    return a;
  }

  static NdArray scalar(double value) { return NdArray({1}, {value}); }

  const std::vector<int>& shape() const { return shape_; }
  int dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Row-major offset helpers for the common ranks used in the repo.
  std::size_t offset2(int i, int j) const {
    return static_cast<std::size_t>(i) * shape_[1] + j;
  }
  std::size_t offset3(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k;
  }
  std::size_t offset4(int i, int j, int k, int l) const {
    return ((static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l;
  }

  double& at2(int i, int j) { return data_[offset2(i, j)]; }
  double at2(int i, int j) const { return data_[offset2(i, j)]; }
  double& at3(int i, int j, int k) { return data_[offset3(i, j, k)]; }
  double at3(int i, int j, int k) const { return data_[offset3(i, j, k)]; }
  double& at4(int i, int j, int k, int l) { return data_[offset4(i, j, k, l)]; }
  double at4(int i, int j, int k, int l) const { return data_[offset4(i, j, k, l)]; }

  bool same_shape(const NdArray& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(double v) { data_.assign(data_.size(), v); }

  NdArray& operator+=(const NdArray& other) {
    require_same_shape(other, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  NdArray& operator-=(const NdArray& other) {
    require_same_shape(other, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
  }

  NdArray& operator*=(double c) {
    for (double& v : data_) v *= c;
    return *this;
  }

  friend NdArray operator+(NdArray a, const NdArray& b) { return a += b; }
  friend NdArray operator-(NdArray a, const NdArray& b) { return a -= b; }
  friend NdArray operator*(NdArray a, double c) { return a *= c; }

  double max_abs_diff(const NdArray& other) const {
    require_same_shape(other, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < data_.size(); ++i)
      m = std::max(m, std::fabs(data_[i] - other.data_[i]));
    return m;
  }

private:
  static std::size_t checked_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("NdArray: dimensions must be positive");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  void require_same_shape(const NdArray& other, const char* what) const {
    if (!same_shape(other))
      throw std::invalid_argument(std::string("NdArray::") + what + ": shape mismatch");
  }

  std::vector<int> shape_;
  std::vector<double> data_;
};

}  // namespace isoscan
