#pragma once

#include "tensor.hpp"

// Constraint side of the joint objective: a warm-up schedule for the target
// sparsity, a penalty R = l1*(s_hat - t) + l2*(s_hat - t)^2 differentiable in
// s_hat, and gradient-ascent multiplier updates. The trainer alternates one
// descent step on model parameters with one ascent step here per batch.

namespace hp::ctrl {

struct ControllerState {
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double target_final = 0.5;   // in [0,1); 0 disables pruning pressure
  double warmup_epochs = 5.0;  // > 0
  double multiplier_lr = 0.02;  // > 0

  void validate() const;
};

// Linear ramp from 0 to target_final over the warm-up window.
double scheduled_target(const ControllerState& s, double epoch_progress);

// Penalty on the signed constraint violation; multipliers enter as constants
// so gradients flow only into s_hat's log_alpha leaves.
Tensor regularizer(const ControllerState& s, const Tensor& s_hat, double t_now);

// One gradient-ascent step on (lambda1, lambda2) at the detached violation.
// lambda1 may go negative; lambda2 is kept nonnegative so the inner
// minimization stays bounded.
void ascend_multipliers(ControllerState& s, double s_hat_value, double t_now);

}  // namespace hp::ctrl
