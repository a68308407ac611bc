#include "reg4rec/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "reg4rec/error.hpp"

namespace reg4rec::numerics {

namespace {

double finite_or_throw(double v) {
  if (!std::isfinite(v)) throw Error("non-finite-objective");
  return v;
}

void score(GradCheckReport& r, double rel_tol, const GradCheckOptions& opts) {
  r.checked = r.analytic.size();
  for (std::size_t i = 0; i < r.analytic.size(); ++i) {
    const double a = r.analytic[i], n = r.numeric[i];
    const double abs_err = std::abs(a - n);
    const double rel = abs_err / std::max({std::abs(a), std::abs(n), opts.floor});
    r.max_abs_error = std::max(r.max_abs_error, abs_err);
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_index = i;
    }
  }
  r.passed = r.max_rel_error < rel_tol;
}

}  // namespace

GradCheckReport grad_check(const PointObjective& fn, const Tensor& point, double rel_tol, GradCheckOptions opts) {
  GradCheckReport r;
  {
    Tape tape;
    auto x = tape.variable(point);
    auto y = fn(tape, x);
    finite_or_throw(y.item());
    tape.backward(y);
    const auto& g = tape.grad(x);
    r.analytic.assign(g.data().begin(), g.data().end());
  }
  auto eval = [&](const Tensor& p) {
    Tape tape(false);
    return finite_or_throw(fn(tape, tape.constant(p)).item());
  };
  Tensor probe = point;
  r.numeric.resize(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double x0 = point[i];
    probe[i] = x0 + opts.step;
    const double up = eval(probe);
    probe[i] = x0 - opts.step;
    const double down = eval(probe);
    probe[i] = x0;
    r.numeric[i] = (up - down) / (2.0 * opts.step);
  }
  score(r, rel_tol, opts);
  return r;
}

GradCheckReport grad_check(const ParamObjective& fn, std::span<Parameter* const> params, double rel_tol,
                           GradCheckOptions opts) {
  GradCheckReport r;
  for (auto* p : params) p->zero_grad();
  {
    Tape tape;
    auto y = fn(tape);
    finite_or_throw(y.item());
    tape.backward(y);
  }
  for (auto* p : params) {
    r.analytic.insert(r.analytic.end(), p->grad.data().begin(), p->grad.data().end());
    p->zero_grad();
  }
  auto eval = [&] {
    Tape tape(false);
    return finite_or_throw(fn(tape).item());
  };
  r.numeric.reserve(r.analytic.size());
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double x0 = p->value[i];
      p->value[i] = x0 + opts.step;
      const double up = eval();
      p->value[i] = x0 - opts.step;
      const double down = eval();
      p->value[i] = x0;
      r.numeric.push_back((up - down) / (2.0 * opts.step));
    }
  }
  score(r, rel_tol, opts);
  return r;
}

}  // namespace reg4rec::numerics
