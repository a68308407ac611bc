#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "reg4rec/ladq/ladq.hpp"
#include "reg4rec/numerics/autodiff.hpp"

namespace reg4rec::oracle {

// All finite non-negative e4m3 values indexed by their 7-bit code.
inline std::vector<double> e4m3_positive_values() {
  std::vector<double> v;
  for (int code = 0; code < 127; ++code) {  // 0x7f is NaN
    const int e = code >> 3, m = code & 7;
    v.push_back(e == 0 ? std::ldexp(m / 8.0, -6) : std::ldexp(1.0 + m / 8.0, e - 7));
  }
  return v;
}

// Nearest e4m3 value by enumeration, ties to the even code, saturating.
inline double e4m3_reference(double x) {
  static const auto table = e4m3_positive_values();
  const double a = std::fabs(x);
  if (a >= table.back()) return std::copysign(table.back(), x);
  std::size_t best = 0;
  for (std::size_t i = 1; i < table.size(); ++i) {
    const double di = std::fabs(table[i] - a), db = std::fabs(table[best] - a);
    if (di < db || (di == db && i % 2 == 0)) best = i;
  }
  return std::copysign(table[best], x);
}

// bf16 via the float32 bit pattern, round to nearest even on the low 16 bits.
inline double bf16_reference(float f) {
  auto bits = std::bit_cast<std::uint32_t>(f);
  bits += 0x7fffu + ((bits >> 16) & 1u);
  bits &= 0xffff0000u;
  return static_cast<double>(std::bit_cast<float>(bits));
}

// Two identical linear layers; the second layer's loss term is scaled by 10.
struct TwoLayerModel {
  numerics::Parameter low, high;
  numerics::Tensor x, y;

  TwoLayerModel() {
    numerics::Tensor w({4, 4}, {0.31, -0.12, 0.05, 0.4, -0.22, 0.17, 0.09, -0.3, 0.11, 0.26, -0.35, 0.07, -0.05,
                                 0.14, 0.21, -0.18});
    low = numerics::Parameter("low", w);
    high = numerics::Parameter("high", w);
    x = numerics::Tensor({2, 4}, {1.0, -0.5, 0.25, 0.75, -0.3, 0.8, -1.1, 0.2});
    y = numerics::Tensor({2, 4}, {0.5, 0.1, -0.2, 0.3, -0.4, 0.6, 0.0, -0.1});
  }

  std::vector<ladq::Layer> layers() { return {{"low", {&low}}, {"high", {&high}}}; }

  // sum((xW_low - y)^2) + 10 * sum((xW_high - y)^2)
  double accumulate_grads(double high_scale = 10.0) {
    namespace ops = numerics::ops;
    low.zero_grad();
    high.zero_grad();
    numerics::Tape tape;
    auto xv = tape.constant(x), yv = tape.constant(y);
    auto a = ops::sum(ops::square(ops::sub(ops::matmul(xv, tape.param(low)), yv)));
    auto b = ops::sum(ops::square(ops::sub(ops::matmul(xv, tape.param(high)), yv)));
    auto loss = ops::add(a, ops::scale(b, high_scale));
    tape.backward(loss);
    return loss.value()[0];
  }
};

}  // namespace reg4rec::oracle
