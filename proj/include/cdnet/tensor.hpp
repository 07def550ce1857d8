#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cdnet/errors.hpp"

namespace cdnet {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of doubles with shape metadata.
///
/// A rank-0 tensor (empty shape) holds one element and is used for scalars.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
    }
    return shape_[axis];
  }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const {
    if (data_.size() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  /// Multi-index access, bounds-checked in rank only.
  double& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  double at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  /// Number of rows when the tensor is viewed as a matrix over its last axis.
  std::size_t rows() const { return shape_.empty() ? 1 : data_.size() / shape_.back(); }
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

  bool operator==(const Tensor& other) const = default;

 private:
  void check_extents() const {
    for (auto e : shape_) {
      if (e == 0) throw DimensionError("zero extent in shape " + shape_str(shape_));
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) {
      throw DimensionError("index rank " + std::to_string(idx.size()) + " does not match shape " +
                           shape_str(shape_));
    }
    std::size_t off = 0;
    std::size_t i = 0;
    for (auto v : idx) off = off * shape_[i++] + v;
    return off;
  }

  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

namespace kernels {

// Row-major GEMM variants. `c` is accumulated into (callers zero it when needed).

/// c[M,N] += a[M,K] * b[K,N]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t M, std::size_t K,
                    std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    double* crow = c + i * N;
    const double* arow = a + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const double av = arow[k];
      const double* brow = b + k * N;
      for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

/// Dot product with eight interleaved partial sums (fixed order, so still deterministic).
inline double dot(const double* a, const double* b, std::size_t K) {
  double acc[8] = {};
  std::size_t k = 0;
  for (; k + 8 <= K; k += 8)
    for (std::size_t u = 0; u < 8; ++u) acc[u] += a[k + u] * b[k + u];
  double s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
  for (; k < K; ++k) s += a[k] * b[k];
  return s;
}

/// c[M,N] += a[M,K] * b[N,K]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t M, std::size_t K,
                    std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* arow = a + i * K;
    for (std::size_t j = 0; j < N; ++j) c[i * N + j] += dot(arow, b + j * K, K);
  }
}

/// c[M,N] += a[K,M]^T * b[K,N]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t M, std::size_t K,
                    std::size_t N) {
  for (std::size_t k = 0; k < K; ++k) {
    const double* arow = a + k * M;
    const double* brow = b + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const double av = arow[i];
      double* crow = c + i * N;
      for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernels

}  // namespace cdnet
