#include "reg4rec/numerics/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "reg4rec/error.hpp"

namespace reg4rec::numerics {

const Tensor& Var::value() const { return tape_->value(id_); }

double Var::item() const {
  const auto& v = value();
  if (v.size() != 1) throw Error("shape-mismatch", "item() on tensor of shape " + v.shape_string());
  return v[0];
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), nullptr, {}, false, false, nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), nullptr, {}, false, record_, nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  nodes_.push_back(Node{{}, &p.value, {}, false, record_, record_ ? &p : nullptr, {}});
  param_nodes_.emplace(&p, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(const Parameter& p) {
  nodes_.push_back(Node{{}, &p.value, {}, false, false, nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(std::size_t id) {
  auto& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor::zeros(value(id).shape());
    n.has_grad = true;
  }
  return n.grad;
}

const Tensor& Tape::grad(Var v) const {
  const auto& n = nodes_[v.id()];
  if (!n.has_grad) throw Error("no-gradient", "node has no gradient; call backward() on a recording tape");
  return n.grad;
}

Var Tape::push(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn));
}

Var Tape::push(Tensor value, std::span<const Var> parents, BackwardFn fn) {
  bool needs = false;
  if (record_) {
    for (const auto& p : parents) needs = needs || nodes_[p.id()].needs_grad;
  }
  nodes_.push_back(Node{std::move(value), nullptr, {}, false, needs, nullptr, needs ? std::move(fn) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  if (!record_) throw Error("not-recording", "backward() on a value-only tape");
  if (loss.tape() != this) throw Error("foreign-var", "loss belongs to another tape");
  if (value(loss.id()).size() != 1) throw Error("shape-mismatch", "backward() needs a scalar loss");
  for (auto& n : nodes_) {
    if (n.has_grad) n.grad.fill(0.0);
  }
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.has_grad || !n.needs_grad) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param != nullptr) {
      auto& pg = n.param->grad;
      const auto& g = n.grad;
      for (std::size_t k = 0; k < g.size(); ++k) pg[k] += g[k];
    }
  }
}

namespace ops {

namespace {

Tape& tape_of(Var a) { return *a.tape(); }

void check_same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw Error("foreign-var", "operands live on different tapes");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw Error("shape-mismatch", std::string(op) + " " + a.shape_string() + " vs " + b.shape_string());
}

Tensor like(const Tensor& t) { return Tensor::matrix(t.rows(), t.cols()); }

template <typename F>
Var unary(Var a, F&& f, Tape::BackwardFn bw) {
  const auto& av = a.value();
  auto out = like(av);
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return tape_of(a).push(std::move(out), {a}, std::move(bw));
}

}  // namespace

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  auto out = numerics::matmul(a.value(), b.value());
  const auto ia = a.id(), ib = b.id();
  return tape_of(a).push(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    const auto n = av.rows(), k = av.cols(), m = bv.cols();
    if (t.needs_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += g(i, j) * bv(p, j);
          ga(i, p) += s;
        }
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av_ip = av(i, p);
          if (av_ip == 0.0) continue;
          for (std::size_t j = 0; j < m; ++j) gb(p, j) += av_ip * g(i, j);
        }
    }
  });
}

Var matmul_nt(Var a, Var b) {
  check_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.cols()) throw Error("shape-mismatch", "matmul_nt " + av.shape_string() + " x " + bv.shape_string() + "^T");
  const auto n = av.rows(), m = bv.rows(), k = av.cols();
  auto out = Tensor::matrix(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) = dot(av.row_span(i), bv.row_span(j));
  const auto ia = a.id(), ib = b.id();
  return tape_of(a).push(std::move(out), {a, b}, [ia, ib, n, m, k](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    if (t.needs_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double gij = g(i, j);
          if (gij == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) ga(i, p) += gij * bv(j, p);
        }
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double gij = g(i, j);
          if (gij == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) gb(j, p) += gij * av(i, p);
        }
    }
  });
}

Var transpose(Var a) {
  auto out = numerics::transpose(a.value());
  const auto ia = a.id();
  return tape_of(a).push(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) ga(j, i) += g(i, j);
  });
}

Var add(Var a, Var b) {
  check_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  auto out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const auto ia = a.id(), ib = b.id();
  return tape_of(a).push(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    for (auto id : {ia, ib}) {
      if (!t.needs_grad(id)) continue;
      auto& gp = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  check_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  auto out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const auto ia = a.id(), ib = b.id();
  return tape_of(a).push(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    if (t.needs_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  check_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  auto out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const auto ia = a.id(), ib = b.id();
  return tape_of(a).push(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    if (t.needs_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var add_row(Var a, Var row) {
  check_same_tape(a, row);
  const auto& rv = row.value();
  auto out = a.value();
  if (rv.rows() != 1 || rv.cols() != out.cols())
    throw Error("shape-mismatch", "add_row " + out.shape_string() + " + " + rv.shape_string());
  const auto n = out.rows(), m = out.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) += rv[j];
  const auto ia = a.id(), ir = row.id();
  return tape_of(a).push(std::move(out), {a, row}, [ia, ir, n, m](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    if (t.needs_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(ir)) {
      auto& gr = t.grad_buffer(ir);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gr[j] += g(i, j);
    }
  });
}

Var mul_col(Var a, Var col) {
  check_same_tape(a, col);
  const auto& cv = col.value();
  auto out = a.value();
  if (cv.cols() != 1 || cv.rows() != out.rows())
    throw Error("shape-mismatch", "mul_col " + out.shape_string() + " * " + cv.shape_string());
  const auto n = out.rows(), m = out.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) *= cv[i];
  const auto ia = a.id(), ic = col.id();
  return tape_of(a).push(std::move(out), {a, col}, [ia, ic, n, m](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& av = t.value(ia);
    const auto& cv = t.value(ic);
    if (t.needs_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) ga(i, j) += g(i, j) * cv[i];
    }
    if (t.needs_grad(ic)) {
      auto& gc = t.grad_buffer(ic);
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += g(i, j) * av(i, j);
        gc[i] += s;
      }
    }
  });
}

Var scale(Var a, double s) {
  const auto ia = a.id();
  return unary(a, [s](double x) { return x * s; }, [ia, s](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

Var add_scalar(Var a, double s) {
  const auto ia = a.id();
  return unary(a, [s](double x) { return x + s; }, [ia](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var tanh(Var a) {
  const auto ia = a.id();
  return unary(a, [](double x) { return std::tanh(x); }, [ia](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& y = t.value(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var relu(Var a) {
  const auto ia = a.id();
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [ia](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& x = t.value(ia);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) ga[i] += g[i];
  });
}

Var exp(Var a) {
  const auto ia = a.id();
  return unary(a, [](double x) { return std::exp(x); }, [ia](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& y = t.value(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

Var log(Var a) {
  const auto ia = a.id();
  return unary(a, [](double x) { return std::log(x); }, [ia](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& x = t.value(ia);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
  });
}

Var square(Var a) {
  const auto ia = a.id();
  return unary(a, [](double x) { return x * x; }, [ia](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& x = t.value(ia);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * g[i] * x[i];
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const auto ia = a.id();
  return tape_of(a).push(Tensor::scalar(s), {a}, [ia](Tape& t, std::size_t self) {
    const double g = t.grad_buffer(self)[0];
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var sum_rows(Var a) {
  const auto& av = a.value();
  const auto n = av.rows(), m = av.cols();
  auto out = Tensor::matrix(1, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j] += av(i, j);
  const auto ia = a.id();
  return tape_of(a).push(std::move(out), {a}, [ia, n, m](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) ga(i, j) += g[j];
  });
}

Var softmax_rows(Var a, bool causal) {
  const auto& av = a.value();
  const auto n = av.rows(), m = av.cols();
  auto out = like(av);
  for (std::size_t i = 0; i < n; ++i) {
    // Causal rows only see columns 0..i.
    const std::size_t width = causal ? std::min(m, i + 1) : m;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < width; ++j) mx = std::max(mx, av(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      out(i, j) = std::exp(av(i, j) - mx);
      z += out(i, j);
    }
    for (std::size_t j = 0; j < width; ++j) out(i, j) /= z;
  }
  const auto ia = a.id();
  return tape_of(a).push(std::move(out), {a}, [ia, n, m](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& y = t.value(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < m; ++j) ga(i, j) += y(i, j) * (g(i, j) - s);
    }
  });
}

Var log_softmax_rows(Var a) {
  const auto& av = a.value();
  const auto n = av.rows(), m = av.cols();
  auto out = like(av);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = av(i, 0);
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, av(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += std::exp(av(i, j) - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < m; ++j) out(i, j) = av(i, j) - lz;
  }
  const auto ia = a.id();
  return tape_of(a).push(std::move(out), {a}, [ia, n, m](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& y = t.value(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += g(i, j);
      for (std::size_t j = 0; j < m; ++j) ga(i, j) += g(i, j) - std::exp(y(i, j)) * s;
    }
  });
}

Var pick(Var a, std::size_t row, std::size_t col) {
  const auto& av = a.value();
  if (row >= av.rows() || col >= av.cols()) throw Error("index-out-of-range", "pick outside " + av.shape_string());
  const auto ia = a.id();
  return tape_of(a).push(Tensor::scalar(av(row, col)), {a}, [ia, row, col](Tape& t, std::size_t self) {
    t.grad_buffer(ia)(row, col) += t.grad_buffer(self)[0];
  });
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  const auto& av = a.value();
  const auto m = av.cols();
  auto out = Tensor::matrix(rows.size(), m);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= av.rows()) throw Error("index-out-of-range", "gather row " + std::to_string(rows[i]));
    std::copy_n(av.row_span(rows[i]).begin(), m, out.row_span(i).begin());
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const auto ia = a.id();
  return tape_of(a).push(std::move(out), {a}, [ia, idx = std::move(idx), m](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < m; ++j) ga(idx[i], j) += g(i, j);
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const auto& av = a.value();
  if (count == 0 || begin + count > av.rows()) throw Error("index-out-of-range", "slice_rows outside " + av.shape_string());
  const auto m = av.cols();
  auto out = Tensor::matrix(count, m);
  std::copy_n(av.data().begin() + begin * m, count * m, out.data().begin());
  const auto ia = a.id();
  return tape_of(a).push(std::move(out), {a}, [ia, begin, count, m](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t k = 0; k < count * m; ++k) ga[begin * m + k] += g[k];
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const auto& av = a.value();
  if (count == 0 || begin + count > av.cols()) throw Error("index-out-of-range", "slice_cols outside " + av.shape_string());
  const auto n = av.rows();
  auto out = Tensor::matrix(n, count);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = av(i, begin + j);
  const auto ia = a.id();
  return tape_of(a).push(std::move(out), {a}, [ia, begin, count, n](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < count; ++j) ga(i, begin + j) += g(i, j);
  });
}

namespace {

Var concat(std::span<const Var> parts, bool by_rows) {
  if (parts.empty()) throw Error("invalid-shape", "concat of nothing");
  Tape& t = tape_of(parts[0]);
  std::size_t rows = 0, cols = 0;
  for (const auto& p : parts) {
    if (p.tape() != &t) throw Error("foreign-var", "operands live on different tapes");
    const auto& v = p.value();
    if (by_rows) {
      if (cols == 0) cols = v.cols();
      if (v.cols() != cols) throw Error("shape-mismatch", "concat_rows column mismatch");
      rows += v.rows();
    } else {
      if (rows == 0) rows = v.rows();
      if (v.rows() != rows) throw Error("shape-mismatch", "concat_cols row mismatch");
      cols += v.cols();
    }
  }
  auto out = Tensor::matrix(rows, cols);
  std::vector<std::size_t> ids;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    for (std::size_t i = 0; i < v.rows(); ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) {
        if (by_rows) out(offset + i, j) = v(i, j);
        else out(i, offset + j) = v(i, j);
      }
    offset += by_rows ? v.rows() : v.cols();
    ids.push_back(p.id());
  }
  return t.push(std::move(out), parts, [ids, by_rows](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_buffer(self);
    std::size_t off = 0;
    for (auto id : ids) {
      const auto& v = tp.value(id);
      if (tp.needs_grad(id)) {
        auto& gp = tp.grad_buffer(id);
        for (std::size_t i = 0; i < v.rows(); ++i)
          for (std::size_t j = 0; j < v.cols(); ++j) gp(i, j) += by_rows ? g(off + i, j) : g(i, off + j);
      }
      off += by_rows ? v.rows() : v.cols();
    }
  });
}

}  // namespace

Var concat_rows(std::span<const Var> parts) { return concat(parts, true); }
Var concat_cols(std::span<const Var> parts) { return concat(parts, false); }

Var layer_norm_rows(Var a, double eps) {
  const auto& av = a.value();
  const auto n = av.rows(), m = av.cols();
  auto out = like(av);
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += av(i, j);
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (av(i, j) - mu) * (av(i, j) - mu);
    var /= static_cast<double>(m);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) out(i, j) = (av(i, j) - mu) * inv_std[i];
  }
  const auto ia = a.id();
  return tape_of(a).push(std::move(out), {a}, [ia, n, m, inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& y = t.value(self);
    auto& ga = t.grad_buffer(ia);
    const double dm = static_cast<double>(m);
    for (std::size_t i = 0; i < n; ++i) {
      double gs = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        gs += g(i, j);
        gy += g(i, j) * y(i, j);
      }
      for (std::size_t j = 0; j < m; ++j) ga(i, j) += inv_std[i] * (g(i, j) - gs / dm - y(i, j) * gy / dm);
    }
  });
}

Var normalize_cols(Var a) {
  const auto& av = a.value();
  const auto n = av.rows(), m = av.cols();
  std::vector<double> norms(m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) norms[j] += av(i, j) * av(i, j);
  for (std::size_t j = 0; j < m; ++j) {
    norms[j] = std::sqrt(norms[j]);
    if (!(norms[j] > 0.0)) throw Error("degenerate-projection", "column " + std::to_string(j) + " has zero norm");
  }
  auto out = like(av);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) = av(i, j) / norms[j];
  const auto ia = a.id();
  return tape_of(a).push(std::move(out), {a}, [ia, n, m, norms = std::move(norms)](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& y = t.value(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t j = 0; j < m; ++j) {
      double yg = 0.0;
      for (std::size_t i = 0; i < n; ++i) yg += y(i, j) * g(i, j);
      for (std::size_t i = 0; i < n; ++i) ga(i, j) += (g(i, j) - y(i, j) * yg) / norms[j];
    }
  });
}

Var clamp(Var a, double lo, double hi) {
  const auto ia = a.id();
  return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); }, [ia, lo, hi](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& x = t.value(ia);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] >= lo && x[i] <= hi) ga[i] += g[i];
  });
}

Var minimum(Var a, Var b) {
  check_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "minimum");
  const auto& av = a.value();
  const auto& bv = b.value();
  auto out = like(av);
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = bv[i] < av[i] ? bv[i] : av[i];
  const auto ia = a.id(), ib = b.id();
  return tape_of(a).push(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool take_b = bv[i] < av[i];
      const auto id = take_b ? ib : ia;
      if (t.needs_grad(id)) t.grad_buffer(id)[i] += g[i];
    }
  });
}

}  // namespace ops
}  // namespace reg4rec::numerics
