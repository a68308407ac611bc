#include "reg4rec/numerics/optim.hpp"

#include <cmath>

namespace reg4rec::numerics {

double grad_norm(std::span<Parameter* const> params) {
  double s = 0.0;
  for (const auto* p : params)
    for (double g : p->grad.data()) s += g * g;
  return std::sqrt(s);
}

Adam::Adam(std::vector<Parameter*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto* p : params_) {
    m_.emplace_back(p->size(), 0.0);
    v_.emplace_back(p->size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

void Adam::step() {
  if (cfg_.lr == 0.0) return;
  double scale = 1.0;
  if (cfg_.clip_norm > 0.0) {
    const double n = grad_norm(params_);
    if (n > cfg_.clip_norm) scale = cfg_.clip_norm / n;
  }
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = p.grad[i] * scale;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      p.value[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
    }
  }
}

}  // namespace reg4rec::numerics
