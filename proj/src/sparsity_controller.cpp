#include "sparsity_controller.hpp"

#include <algorithm>
#include <cmath>

#include "ops.hpp"

namespace hp::ctrl {

void ControllerState::validate() const {
  HP_CHECK(target_final >= 0.0 && target_final < 1.0,
           "target sparsity must lie in [0,1), got " << target_final);
  HP_CHECK(warmup_epochs > 0.0, "warmup_epochs must be positive, got " << warmup_epochs);
  HP_CHECK(multiplier_lr > 0.0, "multiplier_lr must be positive, got " << multiplier_lr);
  HP_CHECK(std::isfinite(lambda1) && std::isfinite(lambda2), "non-finite multipliers");
}

double scheduled_target(const ControllerState& s, double epoch_progress) {
  HP_CHECK(epoch_progress >= 0.0, "epoch progress must be nonnegative, got " << epoch_progress);
  return std::min(epoch_progress / s.warmup_epochs, 1.0) * s.target_final;
}

Tensor regularizer(const ControllerState& s, const Tensor& s_hat, double t_now) {
  HP_CHECK(s_hat.defined() && s_hat.numel() == 1, "expected sparsity must be a scalar");
  Tensor diff = ops::add_scalar(s_hat, -t_now);
  return ops::add(ops::mul_scalar(diff, s.lambda1),
                  ops::mul_scalar(ops::mul(diff, diff), s.lambda2));
}

void ascend_multipliers(ControllerState& s, double s_hat_value, double t_now) {
  const double v = s_hat_value - t_now;
  s.lambda1 += s.multiplier_lr * v;
  s.lambda2 = std::max(0.0, s.lambda2 + s.multiplier_lr * v * v);
}

}  // namespace hp::ctrl
