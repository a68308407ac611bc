#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace reg4rec::numerics {

// Dense row-major f64 tensor. Rank 1 tensors behave as a single row when
// used by the matrix kernels.
class Tensor {
 public:
  Tensor() = default;

  // Validating constructor: product(shape) must equal values.size() and every
  // value must be finite.
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor filled(std::vector<std::size_t> shape, double value);
  static Tensor matrix(std::size_t rows, std::size_t cols) { return zeros({rows, cols}); }
  static Tensor row(std::span<const double> values);
  static Tensor scalar(double value) { return filled({1, 1}, value); }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Matrix view: rank-1 tensors are 1 x n, rank-2 tensors are rows x cols.
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row_span(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  const std::vector<double>& values() const noexcept { return data_; }

  bool all_finite() const noexcept;
  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
  std::string shape_string() const;

  void fill(double value);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Tensor(std::vector<std::size_t> shape, std::vector<double> values, bool /*unchecked*/);
  void cache_cols();

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
  std::size_t cols_ = 0;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

// Plain kernels used outside the tape.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
double squared_distance(std::span<const double> a, std::span<const double> b);
double dot(std::span<const double> a, std::span<const double> b);

}  // namespace reg4rec::numerics
