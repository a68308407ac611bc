#pragma once

#include <span>
#include <vector>

#include "reg4rec/numerics/autodiff.hpp"

namespace reg4rec::numerics {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global L2 norm clip on the gradient; <= 0 disables.
  double clip_norm = 0.0;
};

// Adam over a fixed parameter list. Minimizes: step() moves against p.grad.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig cfg);

  void step();
  void zero_grad();
  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  std::vector<Parameter*> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

double grad_norm(std::span<Parameter* const> params);

}  // namespace reg4rec::numerics
