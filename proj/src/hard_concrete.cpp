#include "hard_concrete.hpp"

#include <cmath>

namespace hp::hc {

void validate(const Params& p) {
  HP_CHECK(p.gamma < 0.0 && p.zeta > 1.0, "gate params need gamma < 0 < 1 < zeta, got gamma="
                                              << p.gamma << " zeta=" << p.zeta);
  HP_CHECK(p.beta > 0.0 && p.beta <= 1.0, "gate temperature must be in (0,1], got " << p.beta);
}

namespace {

double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// Gauss-Legendre nodes/weights on [0,1], computed once by Newton iteration.
struct Quadrature {
  static constexpr int kOrder = 96;
  double node[kOrder];
  double weight[kOrder];
  Quadrature() {
    const double pi = 3.14159265358979323846;
    for (int i = 0; i < kOrder; ++i) {
      // initial guess for the i-th root of P_n on [-1,1]
      double x = std::cos(pi * (i + 0.75) / (kOrder + 0.5));
      double dp = 0;
      for (int it = 0; it < 100; ++it) {
        double p0 = 1.0, p1 = x;
        for (int k = 2; k <= kOrder; ++k) {
          double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
          p0 = p1;
          p1 = p2;
        }
        dp = kOrder * (x * p1 - p0) / (x * x - 1.0);
        double dx = p1 / dp;
        x -= dx;
        if (std::fabs(dx) < 1e-15) break;
      }
      node[i] = 0.5 * (1.0 + x);  // map [-1,1] -> [0,1]
      weight[i] = 1.0 / ((1.0 - x * x) * dp * dp);  // 2/((1-x^2)P'^2) times the 0.5 interval scale
    }
  }
};

const Quadrature& quad() {
  static Quadrature q;
  return q;
}

}  // namespace

GateSample sample_z(double log_alpha, double u, const Params& p) {
  validate(p);
  HP_CHECK(u > 0.0 && u < 1.0, "gate sample needs u strictly inside (0,1), got " << u);
  double s = sigmoid((std::log(u) - std::log1p(-u) + log_alpha) / p.beta);
  double z = std::min(1.0, std::max(0.0, s * (p.zeta - p.gamma) + p.gamma));
  return {z, u};
}

double prob_nonzero(double log_alpha, const Params& p) {
  validate(p);
  return sigmoid(log_alpha - p.beta * std::log(-p.gamma / p.zeta));
}

double deterministic_gate(double log_alpha, const Params& p) {
  validate(p);
  return std::min(1.0, std::max(0.0, sigmoid(log_alpha) * (p.zeta - p.gamma) + p.gamma));
}

double expected_z(double log_alpha, const Params& p) {
  validate(p);
  // P(z > v) = sigmoid(log_alpha − beta·ln((v−gamma)/(zeta−v))), smooth for v in [0,1].
  const Quadrature& q = quad();
  double acc = 0.0;
  for (int i = 0; i < Quadrature::kOrder; ++i) {
    double v = q.node[i];
    double tail = sigmoid(log_alpha - p.beta * std::log((v - p.gamma) / (p.zeta - v)));
    acc += q.weight[i] * tail;
  }
  return acc;
}

Tensor sample_gates(const Tensor& log_alpha, const std::vector<double>& u, const Params& p) {
  validate(p);
  HP_CHECK(static_cast<int64_t>(u.size()) == log_alpha.numel(),
           "gate sampling got " << u.size() << " draws for " << log_alpha.numel() << " gates");
  std::vector<double> logit_u(u.size());
  for (size_t i = 0; i < u.size(); ++i) {
    HP_CHECK(u[i] > 0.0 && u[i] < 1.0, "gate sample needs u strictly inside (0,1), got " << u[i]);
    logit_u[i] = std::log(u[i]) - std::log1p(-u[i]);
  }
  Tensor lu = Tensor::from_vector(log_alpha.shape(), logit_u, log_alpha.dtype());
  Tensor s = ops::sigmoid(ops::mul_scalar(ops::add(log_alpha, lu), 1.0 / p.beta));
  return ops::clamp(ops::add_scalar(ops::mul_scalar(s, p.zeta - p.gamma), p.gamma), 0.0, 1.0);
}

Tensor prob_nonzero_t(const Tensor& log_alpha, const Params& p) {
  validate(p);
  return ops::sigmoid(ops::add_scalar(log_alpha, -p.beta * std::log(-p.gamma / p.zeta)));
}

Tensor deterministic_gates(const Tensor& log_alpha, const Params& p) {
  validate(p);
  Tensor s = ops::sigmoid(log_alpha);
  return ops::clamp(ops::add_scalar(ops::mul_scalar(s, p.zeta - p.gamma), p.gamma), 0.0, 1.0);
}

}  // namespace hp::hc
