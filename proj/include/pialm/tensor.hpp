#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pialm/errors.hpp"

namespace pialm {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major array. Rank 0 is a scalar holding one element.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), T(0)) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  // Matrix view: everything but the last axis folds into rows.
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : data_.size() / cols(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  T item() const {
    if (data_.size() != 1) {
      throw ContractError("item() on tensor of shape " + shape_string(shape_));
    }
    return data_[0];
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    for (const T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

// Rows [begin, begin + count) of a matrix.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& m, std::size_t begin, std::size_t count) {
  if (begin + count > m.rows()) {
    throw DimensionError("row slice [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of " + shape_string(m.shape()));
  }
  const std::size_t c = m.cols();
  std::vector<T> out(m.data().begin() + begin * c, m.data().begin() + (begin + count) * c);
  return Tensor<T>({count, c}, std::move(out));
}

// Vertical concatenation of matrices with equal column counts.
template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.empty()) return b.rank() == 2 ? b : Tensor<T>({b.rows(), b.cols()}, b.storage());
  if (b.empty()) return a.rank() == 2 ? a : Tensor<T>({a.rows(), a.cols()}, a.storage());
  if (a.cols() != b.cols()) {
    throw DimensionError("concat_rows: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  std::vector<T> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  return Tensor<T>({a.rows() + b.rows(), a.cols()}, std::move(out));
}

// Raw kernels. All accumulate into `c` in a fixed loop order so results are
// reproducible run to run.
namespace kernels {

// c[m x n] += a[m x k] * b[k x n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c);

// c[m x n] += a[m x k] * b[n x k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c);

// c[m x n] += a[k x m]^T * b[k x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c);

}  // namespace kernels

}  // namespace pialm
