#pragma once

#include <functional>
#include <span>
#include <vector>

#include "reg4rec/numerics/autodiff.hpp"

namespace reg4rec::numerics {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = false;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

struct GradCheckOptions {
  double step = 1e-5;
  // Denominator floor for the relative error, so coordinates whose true
  // gradient is ~0 are judged on absolute error instead.
  double floor = 1e-6;
};

// fn builds a scalar on the given tape from the leaf x.
using PointObjective = std::function<Var(Tape&, Var x)>;
// fn builds a scalar on the given tape, reading parameters via tape.param().
using ParamObjective = std::function<Var(Tape&)>;

// Compares reverse-mode gradients against central finite differences.
// Throws "non-finite-objective" if fn is not finite anywhere it is evaluated.
GradCheckReport grad_check(const PointObjective& fn, const Tensor& point, double rel_tol,
                           GradCheckOptions opts = {});

// Same check over every coordinate of the given parameters. Parameter values
// are restored on return; parameter gradients are left zeroed.
GradCheckReport grad_check(const ParamObjective& fn, std::span<Parameter* const> params, double rel_tol,
                           GradCheckOptions opts = {});

}  // namespace reg4rec::numerics
