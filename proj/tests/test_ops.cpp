#include <cstring>

#include "doctest.h"
#include "gradcheck.hpp"
#include "ops.hpp"

using namespace hp;
namespace O = hp::ops;
using hptest::gradcheck;
using hptest::rand_tensor;

namespace {
constexpr double kGradTol = 1e-5;

// Bit-level equality of two same-shape f64 tensors.
bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  return std::memcmp(a.impl()->data.data(), b.impl()->data.data(), a.impl()->data.size()) == 0;
}
}  // namespace

TEST_CASE("matmul identity passthrough") {
  Tensor a = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from_vector({2, 2}, {1, 0, 0, 1});
  Tensor c = O::matmul(a, eye);
  CHECK(c.to_vector() == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("matmul forward against hand-computed product") {
  Tensor a = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_vector({3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor c = O::matmul(a, b);
  CHECK(c.to_vector() == std::vector<double>{58, 64, 139, 154});
}

TEST_CASE("softmax of equal logits is uniform") {
  Tensor x = Tensor::from_vector({2}, {0, 0});
  Tensor y = O::softmax_last(x);
  CHECK(y.value_at(0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(y.value_at(1) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("conv1d hand-unrolled sliding dot product") {
  Tensor x = Tensor::from_vector({1, 1, 4}, {1, 1, 1, 1});
  Tensor w = Tensor::from_vector({1, 1, 2}, {1, 1});
  Tensor y = O::conv1d(x, w, 1);
  CHECK(y.shape() == Shape{1, 1, 3});
  CHECK(y.to_vector() == std::vector<double>{2, 2, 2});
}

TEST_CASE("conv1d stride-2 output length") {
  Tensor x = Tensor::from_vector({1, 1, 7}, {1, 2, 3, 4, 5, 6, 7});
  Tensor w = Tensor::from_vector({1, 1, 3}, {1, 0, -1});
  Tensor y = O::conv1d(x, w, 2);
  CHECK(y.shape() == Shape{1, 1, 3});
  // windows at t=0,2,4: x[t]-x[t+2]
  CHECK(y.to_vector() == std::vector<double>{-2, -2, -2});
}

TEST_CASE("sigmoid derivative at zero is one quarter") {
  Tensor x = Tensor::zeros({}, Dtype::F64, true);
  Tape::instance().clear();
  Tensor y = O::sigmoid(x);
  backward(y);
  CHECK(x.grad_at(0) == doctest::Approx(0.25).epsilon(1e-12));
  Tape::instance().clear();
}

TEST_CASE("unused leaf keeps zero gradient") {
  Tensor used = rand_tensor({3}, 1);
  Tensor unused = rand_tensor({3}, 2);
  Tape::instance().clear();
  Tensor loss = O::sum_all(O::mul(used, used));
  backward(loss);
  for (int64_t i = 0; i < 3; ++i) CHECK(unused.grad_at(i) == 0.0);
  Tape::instance().clear();
}

TEST_CASE("matmul gradient matches central differences (3x3)") {
  auto f = [](std::vector<Tensor>& in) { return O::sum_all(O::matmul(in[0], in[1])); };
  auto r = gradcheck(f, {rand_tensor({3, 3}, 3), rand_tensor({3, 3}, 4)});
  CHECK(r.checked == 18);
  CHECK(r.max_err < kGradTol);
}

TEST_CASE("batched matmul gradients") {
  auto f = [](std::vector<Tensor>& in) { return O::sum_all(O::bmm(in[0], in[1])); };
  auto r = gradcheck(f, {rand_tensor({2, 3, 4}, 5), rand_tensor({2, 4, 2}, 6)});
  CHECK(r.max_err < kGradTol);

  auto fnt = [](std::vector<Tensor>& in) { return O::sum_all(O::bmm_nt(in[0], in[1])); };
  auto rnt = gradcheck(fnt, {rand_tensor({2, 3, 4}, 7), rand_tensor({2, 5, 4}, 8)});
  CHECK(rnt.max_err < kGradTol);
}

TEST_CASE("bmm_nt equals bmm against manual transpose") {
  Tensor a = rand_tensor({2, 3, 4}, 9, -2, 2, false);
  Tensor b = rand_tensor({2, 5, 4}, 10, -2, 2, false);
  Tensor bt = O::permute(b, {0, 2, 1});
  CHECK(bit_equal(O::bmm_nt(a, b), O::bmm(a, bt)) == false);  // summation trees differ by design
  auto y1 = O::bmm_nt(a, b).to_vector();
  auto y2 = O::bmm(a, bt).to_vector();
  for (size_t i = 0; i < y1.size(); ++i) CHECK(y1[i] == doctest::Approx(y2[i]).epsilon(1e-12));
}

TEST_CASE("conv1d gradients, multichannel strided") {
  auto f = [](std::vector<Tensor>& in) { return O::sum_all(O::conv1d(in[0], in[1], 2)); };
  auto r = gradcheck(f, {rand_tensor({2, 3, 9}, 11), rand_tensor({4, 3, 3}, 12)});
  CHECK(r.max_err < kGradTol);
}

TEST_CASE("elementwise binary ops with trailing-axis broadcast") {
  Tensor a = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor row = Tensor::from_vector({3}, {10, 20, 30});
  CHECK(O::add(a, row).to_vector() == std::vector<double>{11, 22, 33, 14, 25, 36});
  CHECK(O::mul(row, a).to_vector() == std::vector<double>{10, 40, 90, 40, 100, 180});
  CHECK(O::sub(a, row).to_vector() == std::vector<double>{-9, -18, -27, -6, -15, -24});

  Tensor col = Tensor::from_vector({2, 1}, {100, 200});
  CHECK(O::add(a, col).to_vector() == std::vector<double>{101, 102, 103, 204, 205, 206});

  for (auto op : {&O::add, &O::sub, &O::mul}) {
    auto f = [op](std::vector<Tensor>& in) { return O::sum_all(O::mul(op(in[0], in[1]), in[2])); };
    auto r = gradcheck(f, {rand_tensor({2, 3}, 13), rand_tensor({3}, 14),
                           rand_tensor({2, 3}, 15, -2, 2, false)});
    CHECK(r.max_err < kGradTol);
  }
}

TEST_CASE("div forward and gradients, denominator bounded away from zero") {
  Tensor a = Tensor::from_vector({2, 2}, {1, 9, -6, 2});
  Tensor b = Tensor::from_vector({2}, {2, 4});
  CHECK(O::div(a, b).to_vector() == std::vector<double>{0.5, 2.25, -3.0, 0.5});
  auto f = [](std::vector<Tensor>& in) { return O::sum_all(O::mul(O::div(in[0], in[1]), in[2])); };
  auto r = gradcheck(f, {rand_tensor({3, 2}, 17), rand_tensor({2}, 18, 0.5, 2.0),
                         rand_tensor({3, 2}, 19, -2, 2, false)});
  CHECK(r.max_err < kGradTol);
}

TEST_CASE("scalar ops") {
  Tensor x = rand_tensor({4}, 16);
  CHECK(O::add_scalar(x, 1.5).value_at(0) == doctest::Approx(x.value_at(0) + 1.5));
  CHECK(O::mul_scalar(x, -2.0).value_at(1) == doctest::Approx(-2.0 * x.value_at(1)));
  auto f = [](std::vector<Tensor>& in) {
    return O::sum_all(O::mul_scalar(O::add_scalar(in[0], 0.7), 3.0));
  };
  CHECK(gradcheck(f, {x}).max_err < kGradTol);
}

TEST_CASE("smooth unary op gradients on random inputs") {
  struct Case {
    const char* name;
    Tensor (*op)(const Tensor&);
    double lo, hi;
  };
  Case cases[] = {
      {"sigmoid", &O::sigmoid, -2, 2}, {"tanh", &O::tanh_t, -2, 2},
      {"gelu", &O::gelu, -2, 2},       {"exp", &O::exp_t, -2, 2},
      {"log", &O::log_t, 0.2, 2},      {"sqrt", &O::sqrt_t, 0.2, 2},
      {"softplus", &O::softplus, -2, 2},
  };
  uint64_t tag = 20;
  for (const Case& c : cases) {
    CAPTURE(c.name);
    auto f = [&c](std::vector<Tensor>& in) {
      return O::sum_all(O::mul(c.op(in[0]), in[1]));  // weighted sum probes all elements
    };
    auto r = gradcheck(f, {rand_tensor({2, 5}, tag, c.lo, c.hi),
                           rand_tensor({2, 5}, tag + 1, -2, 2, false)});
    CHECK(r.max_err < kGradTol);
    tag += 2;
  }
}

TEST_CASE("relu gradient away from the kink") {
  Tensor x = Tensor::from_vector({4}, {-1.5, -0.3, 0.4, 1.7}, Dtype::F64, true);
  auto f = [](std::vector<Tensor>& in) { return O::sum_all(O::relu(in[0])); };
  CHECK(gradcheck(f, {x}).max_err < kGradTol);
  CHECK(O::relu(x).to_vector() == std::vector<double>{0, 0, 0.4, 1.7});
}

TEST_CASE("pow_scalar gradient") {
  auto f = [](std::vector<Tensor>& in) { return O::sum_all(O::pow_scalar(in[0], -0.5)); };
  CHECK(gradcheck(f, {rand_tensor({5}, 30, 0.3, 2.0)}).max_err < kGradTol);
}

TEST_CASE("clamp subgradient: identity inside, zero outside and at boundaries") {
  Tensor x = Tensor::from_vector({5}, {-0.5, 0.0, 0.5, 1.0, 1.5}, Dtype::F64, true);
  Tape::instance().clear();
  Tensor y = O::clamp(x, 0.0, 1.0);
  CHECK(y.to_vector() == std::vector<double>{0, 0, 0.5, 1, 1});
  backward(O::sum_all(y));
  CHECK(x.grad_at(0) == 0.0);  // below
  CHECK(x.grad_at(1) == 0.0);  // exactly at lower boundary
  CHECK(x.grad_at(2) == 1.0);  // inside
  CHECK(x.grad_at(3) == 0.0);  // exactly at upper boundary
  CHECK(x.grad_at(4) == 0.0);  // above
  Tape::instance().clear();
}

TEST_CASE("sqrt gradient defined as zero at zero") {
  Tensor x = Tensor::zeros({1}, Dtype::F64, true);
  Tape::instance().clear();
  backward(O::sum_all(O::sqrt_t(x)));
  CHECK(x.grad_at(0) == 0.0);
  Tape::instance().clear();
}

TEST_CASE("softmax_last forward and gradient") {
  Tensor x = Tensor::from_vector({3}, {1, 2, 3});
  auto y = O::softmax_last(x).to_vector();
  double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(y[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-12));
  CHECK(y[2] == doctest::Approx(std::exp(3.0) / z).epsilon(1e-12));

  auto f = [](std::vector<Tensor>& in) {
    return O::sum_all(O::mul(O::softmax_last(in[0]), in[1]));
  };
  auto r = gradcheck(f, {rand_tensor({2, 4}, 31), rand_tensor({2, 4}, 32, -2, 2, false)});
  CHECK(r.max_err < kGradTol);
}

TEST_CASE("softmax row gradients sum to zero") {
  Tensor x = rand_tensor({3, 5}, 33);
  Tensor w = rand_tensor({3, 5}, 34, -2, 2, false);
  Tape::instance().clear();
  backward(O::sum_all(O::mul(O::softmax_last(x), w)));
  for (int64_t r = 0; r < 3; ++r) {
    double s = 0;
    for (int64_t j = 0; j < 5; ++j) s += x.grad_at(r * 5 + j);
    CHECK(std::fabs(s) < 1e-12);
  }
  Tape::instance().clear();
}

TEST_CASE("layer_norm_last forward oracle and gradients") {
  // Row [1,3]: mean 2, var 1, so normalized to [-1,1] up to the eps term.
  Tensor x = Tensor::from_vector({1, 2}, {1, 3});
  Tensor g = Tensor::from_vector({2}, {1, 1});
  Tensor b = Tensor::from_vector({2}, {0, 0});
  auto y = O::layer_norm_last(x, g, b, 1e-5).to_vector();
  double inv = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(y[0] == doctest::Approx(-inv).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(inv).epsilon(1e-12));

  auto f = [](std::vector<Tensor>& in) {
    return O::sum_all(O::mul(O::layer_norm_last(in[0], in[1], in[2]), in[3]));
  };
  auto r = gradcheck(f, {rand_tensor({3, 6}, 35), rand_tensor({6}, 36, 0.5, 1.5),
                         rand_tensor({6}, 37), rand_tensor({3, 6}, 38, -2, 2, false)});
  CHECK(r.max_err < 2e-5);  // mean/var coupling amplifies fd noise slightly
}

TEST_CASE("reductions") {
  Tensor x = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(O::sum_all(x).item() == 21.0);
  CHECK(O::mean_all(x).item() == doctest::Approx(3.5).epsilon(1e-15));
  CHECK(O::sum_last(x).to_vector() == std::vector<double>{6, 15});

  auto f = [](std::vector<Tensor>& in) { return O::sum_all(O::mul(O::sum_last(in[0]), in[1])); };
  CHECK(gradcheck(f, {rand_tensor({2, 3}, 39), rand_tensor({2}, 40, -2, 2, false)}).max_err < kGradTol);
  auto fm = [](std::vector<Tensor>& in) { return O::mean_all(in[0]); };
  CHECK(gradcheck(fm, {rand_tensor({2, 3}, 41)}).max_err < kGradTol);
}

TEST_CASE("concat_last and slice round trip") {
  Tensor a = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_vector({2, 1}, {9, 8});
  Tensor cat = O::concat_last({a, b});
  CHECK(cat.shape() == Shape{2, 3});
  CHECK(cat.to_vector() == std::vector<double>{1, 2, 9, 3, 4, 8});
  CHECK(O::slice(cat, 1, 0, 2).to_vector() == std::vector<double>{1, 2, 3, 4});
  CHECK(O::slice(cat, 1, 2, 1).to_vector() == std::vector<double>{9, 8});
  CHECK(O::slice(cat, 0, 1, 1).to_vector() == std::vector<double>{3, 4, 8});

  auto f = [](std::vector<Tensor>& in) {
    return O::sum_all(O::mul(O::concat_last({in[0], in[1]}), in[2]));
  };
  CHECK(gradcheck(f, {rand_tensor({2, 2}, 42), rand_tensor({2, 3}, 43),
                      rand_tensor({2, 5}, 44, -2, 2, false)})
            .max_err < kGradTol);
  auto fs = [](std::vector<Tensor>& in) {
    return O::sum_all(O::mul(O::slice(in[0], 1, 1, 2), in[1]));
  };
  CHECK(gradcheck(fs, {rand_tensor({3, 4}, 45), rand_tensor({3, 2}, 46, -2, 2, false)}).max_err <
        kGradTol);
}

TEST_CASE("permute and reshape") {
  Tensor x = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor xt = O::permute(x, {1, 0});
  CHECK(xt.shape() == Shape{3, 2});
  CHECK(xt.to_vector() == std::vector<double>{1, 4, 2, 5, 3, 6});
  CHECK(O::reshape(x, {3, 2}).to_vector() == std::vector<double>{1, 2, 3, 4, 5, 6});

  auto fp = [](std::vector<Tensor>& in) {
    return O::sum_all(O::mul(O::permute(in[0], {2, 0, 1}), in[1]));
  };
  CHECK(gradcheck(fp, {rand_tensor({2, 3, 4}, 47), rand_tensor({4, 2, 3}, 48, -2, 2, false)})
            .max_err < kGradTol);
  auto fr = [](std::vector<Tensor>& in) {
    return O::sum_all(O::mul(O::reshape(in[0], {6}), in[1]));
  };
  CHECK(gradcheck(fr, {rand_tensor({2, 3}, 49), rand_tensor({6}, 50, -2, 2, false)}).max_err <
        kGradTol);
}

TEST_CASE("gather_last and one_hot") {
  Tensor x = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(O::gather_last(x, {2, 0}).to_vector() == std::vector<double>{3, 4});
  CHECK_THROWS_AS(O::gather_last(x, {3, 0}), Error);

  Tensor oh = O::one_hot({1, 0, 2}, 3, Dtype::F64);
  CHECK(oh.to_vector() == std::vector<double>{0, 1, 0, 1, 0, 0, 0, 0, 1});
  CHECK(oh.requires_grad() == false);

  auto f = [](std::vector<Tensor>& in) { return O::sum_all(O::gather_last(in[0], {2, 0})); };
  CHECK(gradcheck(f, {rand_tensor({2, 3}, 51)}).max_err < kGradTol);
}

TEST_CASE("gradients accumulate additively across uses") {
  Tensor x = Tensor::from_vector({2}, {3, 5}, Dtype::F64, true);
  Tape::instance().clear();
  Tensor y = O::add(O::mul(x, x), x);  // x^2 + x, x used three times
  backward(O::sum_all(y));
  CHECK(x.grad_at(0) == doctest::Approx(7.0).epsilon(1e-12));   // 2*3+1
  CHECK(x.grad_at(1) == doctest::Approx(11.0).epsilon(1e-12));  // 2*5+1
  Tape::instance().clear();
}

TEST_CASE("shape errors name the op and shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_WITH_AS(O::matmul(a, b), doctest::Contains("matmul"), Error);
  CHECK_THROWS_WITH_AS(O::matmul(a, b), doctest::Contains("[2,3]"), Error);
  Tensor c = Tensor::zeros({2, 5});
  CHECK_THROWS_WITH_AS(O::add(a, c), doctest::Contains("broadcast"), Error);
  CHECK_THROWS_AS(backward(a), Error);  // non-scalar root
}

TEST_CASE("debug mode flags non-finite inputs") {
  Tensor x = Tensor::from_vector({2}, {1.0, std::numeric_limits<double>::infinity()});
  set_debug_checks(true);
  CHECK_THROWS_WITH_AS(O::exp_t(x), doctest::Contains("non-finite"), Error);
  set_debug_checks(false);
  CHECK_NOTHROW(O::tanh_t(x));
}

TEST_CASE("composite pipeline repeat-forward determinism") {
  auto run = [] {
    NoGradGuard ng;
    Tensor x = rand_tensor({4, 3, 16}, 64, -2, 2, false);
    Tensor w = rand_tensor({8, 3, 3}, 65, -2, 2, false);
    Tensor g = rand_tensor({8}, 66, 0.5, 1.5, false);
    Tensor b = rand_tensor({8}, 67, -1, 1, false);
    Tensor h = O::conv1d(x, w, 2);                  // [4,8,7]
    Tensor p = O::permute(h, {0, 2, 1});            // [4,7,8]
    Tensor n = O::layer_norm_last(O::gelu(p), g, b);
    Tensor a = O::softmax_last(O::bmm_nt(n, n));    // [4,7,7]
    return O::bmm(a, n);                            // [4,7,8]
  };
  Tensor y1 = run();
  Tensor y2 = run();
  CHECK(bit_equal(y1, y2));
}
