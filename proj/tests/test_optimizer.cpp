#include <cmath>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "optimizer.hpp"
#include "tensor.hpp"

using namespace hp;
using optim::AdamW;
using optim::GroupConfig;

namespace {

void set_grad(Tensor& t, const std::vector<double>& g) {
  t.zero_grad();
  Tensor gt = Tensor::from_vector(t.shape(), g, t.dtype(), false);
  t.accumulate_grad_from(gt);
}

}  // namespace

TEST_CASE("updates match a scalar re-derivation over many steps") {
  Tensor p = Tensor::from_vector({2}, {1.0, -0.5}, Dtype::F64, true);
  GroupConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;
  AdamW opt;
  opt.add_group({p}, cfg);

  double ref[2] = {1.0, -0.5};
  double m[2] = {0, 0}, v[2] = {0, 0};
  for (int step = 1; step <= 25; ++step) {
    std::vector<double> g = {0.5 * std::sin(step * 0.3), -0.2 + 0.05 * step};
    set_grad(p, g);
    opt.step();
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[static_cast<size_t>(i)];
      v[i] = 0.999 * v[i] + 0.001 * g[static_cast<size_t>(i)] * g[static_cast<size_t>(i)];
      double mh = m[i] / (1.0 - std::pow(0.9, step));
      double vh = v[i] / (1.0 - std::pow(0.999, step));
      ref[i] -= 0.1 * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * ref[i]);
    }
    CHECK(p.value_at(0) == doctest::Approx(ref[0]).epsilon(1e-14));
    CHECK(p.value_at(1) == doctest::Approx(ref[1]).epsilon(1e-14));
  }
  CHECK(opt.steps() == 25);
}

TEST_CASE("weight decay applies per group, not to gate logits") {
  Tensor theta = Tensor::from_vector({1}, {2.0}, Dtype::F64, true);
  Tensor la = Tensor::from_vector({1}, {2.0}, Dtype::F64, true);
  GroupConfig wcfg;
  wcfg.lr = 0.5;
  wcfg.weight_decay = 0.01;
  GroupConfig gcfg;
  gcfg.lr = 0.5;
  gcfg.weight_decay = 0.0;
  AdamW opt;
  opt.add_group({theta}, wcfg);
  opt.add_group({la}, gcfg);
  // zero gradient: the only movement comes from decoupled decay
  theta.zero_grad();
  la.zero_grad();
  opt.step();
  CHECK(theta.value_at(0) == doctest::Approx(2.0 - 0.5 * 0.01 * 2.0).epsilon(1e-15));
  CHECK(la.value_at(0) == 2.0);
}

TEST_CASE("zero learning rate leaves parameters untouched") {
  Tensor p = Tensor::from_vector({3}, {1.0, 2.0, 3.0}, Dtype::F64, true);
  GroupConfig cfg;
  cfg.lr = 0.0;
  cfg.weight_decay = 0.01;
  AdamW opt;
  opt.add_group({p}, cfg);
  set_grad(p, {5.0, -5.0, 5.0});
  opt.step();
  CHECK(p.to_vector() == std::vector<double>{1.0, 2.0, 3.0});
}

TEST_CASE("global norm clip rescales exactly above the threshold") {
  Tensor a = Tensor::from_vector({2}, {6.0, 0.0}, Dtype::F64, true);
  Tensor b = Tensor::from_vector({1}, {8.0}, Dtype::F64, true);
  set_grad(a, {6.0, 0.0});
  set_grad(b, {8.0});
  CHECK(optim::global_grad_norm({a, b}) == doctest::Approx(10.0).epsilon(1e-15));
  double pre = optim::clip_global_norm({a, b}, 5.0);
  CHECK(pre == doctest::Approx(10.0).epsilon(1e-15));
  CHECK(a.grad_at(0) == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(b.grad_at(0) == doctest::Approx(4.0).epsilon(1e-15));
  // at or below the threshold nothing changes
  double pre2 = optim::clip_global_norm({a, b}, 5.0);
  CHECK(pre2 == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(a.grad_at(0) == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("missing grad buffers are treated as zero gradient") {
  Tensor p = Tensor::from_vector({1}, {1.0}, Dtype::F64, true);
  AdamW opt;
  GroupConfig cfg;
  cfg.lr = 0.1;
  opt.add_group({p}, cfg);
  opt.step();  // no grad ever set
  CHECK(p.value_at(0) == 1.0);
  CHECK(optim::global_grad_norm({p}) == 0.0);
}

TEST_CASE("optimizer config validation") {
  GroupConfig bad;
  bad.lr = -1.0;
  AdamW opt;
  CHECK_THROWS_WITH_AS(opt.add_group({}, bad), doctest::Contains("learning rate"), Error);
  bad.lr = 0.1;
  bad.beta1 = 1.0;
  CHECK_THROWS_WITH_AS(opt.add_group({}, bad), doctest::Contains("moment decays"), Error);
  Tensor nograd = Tensor::zeros({1}, Dtype::F64, false);
  GroupConfig ok;
  CHECK_THROWS_WITH_AS(opt.add_group({nograd}, ok), doctest::Contains("require grad"), Error);
}
