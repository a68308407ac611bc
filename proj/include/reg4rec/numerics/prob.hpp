#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace reg4rec::numerics {

inline constexpr double kProbFloor = 1e-12;

// Numerically stable exp-normalize. Throws "empty-logits" on empty input and
// "non-finite" on NaN/Inf logits.
std::vector<double> softmax(std::span<const double> logits);
std::vector<double> log_softmax(std::span<const double> logits);

struct CrossEntropy {
  double loss = 0.0;
  // True when probs[target] fell below kProbFloor and was clamped.
  bool clamped = false;
};

CrossEntropy cross_entropy(std::span<const double> probs, std::size_t target_index);

// Lowest index among the maxima.
std::size_t argmax(std::span<const double> values);

// Throws "invalid-distribution" unless entries are finite, nonnegative and sum
// to one within tol.
void validate_distribution(std::span<const double> p, double tol = 1e-9);

// KL(p || q) with natural log; 0 * log(0 / q) = 0.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// Jensen-Shannon divergence with natural log, in [0, ln 2].
double js_divergence(std::span<const double> p, std::span<const double> q);

}  // namespace reg4rec::numerics
