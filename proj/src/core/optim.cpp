#include "svqa/core/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace svqa {

AdamResult adam_step(std::span<Parameter* const> params, const AdamConfig& cfg) {
  if (!(cfg.lr > 0.0) || cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0) {
    throw ContractViolation("adam_step: need lr > 0 and 0 <= beta1, beta2 < 1");
  }
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    if (!p->grad.all_finite()) return {false, p->name};
  }
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    if (p->adam_m.shape() != p->value.shape()) p->adam_m = Array(p->value.shape());
    if (p->adam_v.shape() != p->value.shape()) p->adam_v = Array(p->value.shape());
    ++p->step;
    const double t = static_cast<double>(p->step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i];
      double& m = p->adam_m[i];
      double& v = p->adam_v[i];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
      p->value[i] -= cfg.lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps);
    }
  }
  return {};
}

double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
  double ss = 0.0;
  for (const Parameter* p : params) {
    if (!p->trainable) continue;
    for (double g : p->grad.values()) ss += g * g;
  }
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm && std::isfinite(norm)) {
    const double s = max_norm / norm;
    for (Parameter* p : params) {
      if (!p->trainable) continue;
      for (double& g : p->grad.values()) g *= s;
    }
  }
  return norm;
}

double cosine_lr(double base, std::int64_t step, std::int64_t total, std::int64_t warmup) {
  if (warmup > 0 && step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return base;
  const double progress = std::clamp(static_cast<double>(step - warmup) / static_cast<double>(total - warmup), 0.0, 1.0);
  return base * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

}  // namespace svqa
