#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "reg4rec/numerics/tensor.hpp"

namespace reg4rec::numerics {

// A trainable tensor together with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())) {}

  void zero_grad() { grad.fill(0.0); }
  std::size_t size() const { return value.size(); }
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  // Value of a 1x1 node.
  double item() const;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Dynamic reverse-mode tape. Nodes are appended in evaluation order, which is a
// topological order, so backward() visits each node exactly once in reverse.
// A tape constructed with record=false computes values only.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf whose gradient is kept on the tape (read it back with grad()).
  Var variable(Tensor value);
  // Leaf bound to a parameter: backward() accumulates into p.grad. The
  // parameter must outlive the tape and not change while it is in use.
  Var param(Parameter& p);
  // Read-only view of a parameter: no gradient flows back into it.
  Var param(const Parameter& p);

  void backward(Var loss);

  const Tensor& value(std::size_t id) const {
    const auto& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  const Tensor& grad(Var v) const;
  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  // Op plumbing.
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  Tensor& grad_buffer(std::size_t id);
  Var push(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);
  Var push(Tensor value, std::span<const Var> parents, BackwardFn fn);

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool has_grad = false;
    bool needs_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

namespace ops {

Var matmul(Var a, Var b);
// a * b^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
// Adds a 1 x n row to every row of a.
Var add_row(Var a, Var row);
// Scales row i of a by col(i, 0).
Var mul_col(Var a, Var col);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var tanh(Var a);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var sum(Var a);
Var mean(Var a);
// Column-wise sum over rows: rows x n -> 1 x n.
Var sum_rows(Var a);
Var softmax_rows(Var a, bool causal = false);
Var log_softmax_rows(Var a);
Var pick(Var a, std::size_t row, std::size_t col);
Var gather_rows(Var a, std::span<const std::size_t> rows);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
// Per-row standardization (no affine part).
Var layer_norm_rows(Var a, double eps = 1e-5);
// L2-normalize every column; throws "degenerate-projection" on a zero column.
Var normalize_cols(Var a);
// Elementwise clamp; gradient is zero where the clamp is active.
Var clamp(Var a, double lo, double hi);
// Elementwise minimum; ties take a.
Var minimum(Var a, Var b);

}  // namespace ops
}  // namespace reg4rec::numerics
