#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

// Shared oracle harness: central finite differences against one reverse sweep.

namespace hptest {

inline double guarded_rel_err(double got, double want) {
  double denom = std::max({std::fabs(got), std::fabs(want), 1e-3});
  return std::fabs(got - want) / denom;
}

struct GradcheckResult {
  double max_err = 0.0;
  int64_t checked = 0;
};

// f builds a scalar loss from the inputs. Analytic gradients come from a single
// backward sweep; each input element is then nudged by ±h with grad tracking off.
inline GradcheckResult gradcheck(const std::function<hp::Tensor(std::vector<hp::Tensor>&)>& f,
                                 std::vector<hp::Tensor> inputs, double h = 1e-6) {
  hp::Tape::instance().clear();
  for (auto& t : inputs) t.zero_grad();
  hp::Tensor loss = f(inputs);
  hp::backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.push_back(t.grad_to_vector());
  hp::Tape::instance().clear();

  GradcheckResult res;
  hp::NoGradGuard ng;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    hp::Tensor& t = inputs[ti];
    if (!t.requires_grad()) continue;
    for (int64_t i = 0; i < t.numel(); ++i) {
      double orig = t.value_at(i);
      t.set_value_at(i, orig + h);
      double up = f(inputs).item();
      t.set_value_at(i, orig - h);
      double dn = f(inputs).item();
      t.set_value_at(i, orig);
      double fd = (up - dn) / (2.0 * h);
      res.max_err = std::max(res.max_err, guarded_rel_err(analytic[ti][static_cast<size_t>(i)], fd));
      ++res.checked;
    }
  }
  return res;
}

// Random test tensor with entries in [lo, hi], reproducible from (tag).
inline hp::Tensor rand_tensor(hp::Shape shape, uint64_t tag, double lo = -2.0, double hi = 2.0,
                              bool requires_grad = true) {
  int64_t n = hp::shape_numel(shape);
  std::vector<double> v(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    v[static_cast<size_t>(i)] =
        lo + (hi - lo) * hp::rng::uniform_open(0xBEEF, hp::rng::kVerifyInputs, tag, static_cast<uint64_t>(i));
  return hp::Tensor::from_vector(std::move(shape), v, hp::Dtype::F64, requires_grad);
}

}  // namespace hptest
