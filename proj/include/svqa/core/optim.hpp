#pragma once

#include <span>
#include <string>

#include "svqa/core/autodiff.hpp"

namespace svqa {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamResult {
  bool applied = true;
  /// Name of the first parameter with a non-finite gradient when the step was skipped.
  std::string offending;
};

/// Bias-corrected Adam on every trainable parameter, reading Parameter::grad.
/// If any gradient is non-finite the whole step is skipped and reported.
AdamResult adam_step(std::span<Parameter* const> params, const AdamConfig& cfg);

/// Scales gradients so their global L2 norm is at most max_norm. Returns the pre-clip norm.
double clip_grad_norm(std::span<Parameter* const> params, double max_norm);

/// Cosine decay from base to 0.1*base over total steps after a linear warm-up.
double cosine_lr(double base, std::int64_t step, std::int64_t total, std::int64_t warmup);

}  // namespace svqa
