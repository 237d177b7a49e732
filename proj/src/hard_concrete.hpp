#pragma once

#include <vector>

#include "ops.hpp"
#include "tensor.hpp"

// Stretched-and-clamped binary concrete gates: a sigmoid relaxation stretched
// to [gamma, zeta] and clamped to [0,1], so exact 0 and exact 1 both carry
// positive probability mass while log_alpha stays trainable by reparameterization.

namespace hp::hc {

struct Params {
  double beta = 2.0 / 3.0;  // temperature, in (0,1]
  double gamma = -0.1;      // stretch lower bound, < 0
  double zeta = 1.1;        // stretch upper bound, > 1
};

void validate(const Params& p);

struct GateSample {
  double z;             // realized gate in [0,1]
  double uniform_draw;  // the u that produced it, for reproducibility
};

// z = clamp(sigmoid((logit(u) + log_alpha)/beta)·(zeta−gamma)+gamma, 0, 1). u strictly in (0,1).
GateSample sample_z(double log_alpha, double u, const Params& p = {});

// P(z != 0) = sigmoid(log_alpha − beta·ln(−gamma/zeta)), exact.
double prob_nonzero(double log_alpha, const Params& p = {});

// Evaluation-mode gate: clamp(sigmoid(log_alpha)·(zeta−gamma)+gamma, 0, 1).
double deterministic_gate(double log_alpha, const Params& p = {});

// E[z] by the layer-cake identity E[z] = ∫₀¹ P(z > v) dv, fixed-order
// Gauss-Legendre quadrature (the integrand is smooth on [0,1]; no closed form).
double expected_z(double log_alpha, const Params& p = {});

// Graph versions over a vector of gates; differentiable w.r.t. log_alpha.
Tensor sample_gates(const Tensor& log_alpha, const std::vector<double>& u, const Params& p = {});
Tensor prob_nonzero_t(const Tensor& log_alpha, const Params& p = {});
Tensor deterministic_gates(const Tensor& log_alpha, const Params& p = {});

}  // namespace hp::hc
