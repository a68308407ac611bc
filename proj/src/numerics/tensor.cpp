#include "reg4rec/numerics/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "reg4rec/error.hpp"

namespace reg4rec::numerics {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (shape_.empty()) throw Error("invalid-shape", "tensor needs at least one dimension");
  for (auto d : shape_) {
    if (d == 0) throw Error("invalid-shape", "dimensions must be positive");
  }
  if (shape_product(shape_) != data_.size()) {
    throw Error("invalid-shape", "shape " + shape_string() + " does not match " +
                                     std::to_string(data_.size()) + " values");
  }
  if (!all_finite()) throw Error("non-finite", "tensor values must be finite");
  cache_cols();
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values, bool)
    : shape_(std::move(shape)), data_(std::move(values)) {
  cache_cols();
}

void Tensor::cache_cols() { cols_ = shape_.empty() ? 0 : shape_.back(); }

Tensor Tensor::zeros(std::vector<std::size_t> shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(std::vector<std::size_t> shape, double value) {
  for (auto d : shape) {
    if (d == 0) throw Error("invalid-shape", "dimensions must be positive");
  }
  auto n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), true);
}

Tensor Tensor::row(std::span<const double> values) {
  return Tensor({1, values.size()}, std::vector<double>(values.begin(), values.end()));
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() == 2) return shape_[0];
  throw Error("invalid-shape", "matrix view needs rank 1 or 2, got " + shape_string());
}

std::size_t Tensor::cols() const {
  if (shape_.size() > 2) throw Error("invalid-shape", "matrix view needs rank 1 or 2, got " + shape_string());
  return cols_;
}

bool Tensor::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
  os << ']';
  return os.str();
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) throw Error("shape-mismatch", "matmul " + a.shape_string() + " x " + b.shape_string());
  auto out = Tensor::matrix(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out.data().data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      if (av == 0.0) continue;
      const double* brow = b.data().data() + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  const auto n = a.rows(), m = a.cols();
  auto out = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(j, i) = a(i, j);
  return out;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("shape-mismatch", "distance between vectors of different length");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("shape-mismatch", "dot of vectors of different length");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace reg4rec::numerics
