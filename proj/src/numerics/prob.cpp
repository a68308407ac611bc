#include "reg4rec/numerics/prob.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "reg4rec/error.hpp"

namespace reg4rec::numerics {

namespace {

double finite_max(std::span<const double> logits) {
  if (logits.empty()) throw Error("empty-logits");
  double m = logits[0];
  for (double x : logits) {
    if (!std::isfinite(x)) throw Error("non-finite", "logits must be finite");
    m = std::max(m, x);
  }
  return m;
}

}  // namespace

std::vector<double> softmax(std::span<const double> logits) {
  const double m = finite_max(logits);
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  const double m = finite_max(logits);
  double z = 0.0;
  for (double x : logits) z += std::exp(x - m);
  const double lz = m + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
  return out;
}

CrossEntropy cross_entropy(std::span<const double> probs, std::size_t target_index) {
  if (target_index >= probs.size()) {
    throw Error("target-out-of-range", "target " + std::to_string(target_index) + " for " +
                                           std::to_string(probs.size()) + " classes");
  }
  const double p = probs[target_index];
  if (!(p >= 0.0) || p > 1.0 + 1e-12) throw Error("invalid-distribution", "probability outside [0, 1]");
  if (p < kProbFloor) return {-std::log(kProbFloor), true};
  // -log(1) is -0.0; report a clean zero.
  return {p >= 1.0 ? 0.0 : -std::log(p), false};
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw Error("empty-logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

void validate_distribution(std::span<const double> p, double tol) {
  if (p.empty()) throw Error("invalid-distribution", "empty distribution");
  double s = 0.0;
  for (double v : p) {
    if (!std::isfinite(v) || v < 0.0) throw Error("invalid-distribution", "entries must be finite and nonnegative");
    s += v;
  }
  if (std::abs(s - 1.0) > tol) throw Error("invalid-distribution", "entries sum to " + std::to_string(s));
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw Error("invalid-distribution", "support size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) return INFINITY;
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(kl, 0.0);
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
  validate_distribution(p);
  validate_distribution(q);
  if (p.size() != q.size()) throw Error("invalid-distribution", "support size mismatch");
  // Summed termwise so the result is exactly symmetric in (p, q).
  double js = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    const double a = p[i] > 0.0 ? 0.5 * p[i] * std::log(p[i] / m) : 0.0;
    const double b = q[i] > 0.0 ? 0.5 * q[i] * std::log(q[i] / m) : 0.0;
    js += a + b;
  }
  return std::clamp(js, 0.0, std::numbers::ln2);
}

}  // namespace reg4rec::numerics
