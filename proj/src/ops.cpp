#include "ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <utility>

namespace hp::ops {

namespace {

void check_finite(const char* op, const Tensor& t, const char* role) {
  if (!debug_checks()) return;
  bool ok = true;
  dispatch_dtype(t.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const S* p = t.impl()->template data_as<S>();
    for (int64_t i = 0; i < t.numel(); ++i) {
      if (!std::isfinite(static_cast<double>(p[i]))) { ok = false; return; }
    }
  });
  HP_CHECK(ok, op << ": non-finite value in " << role);
}

bool grads_wanted(std::initializer_list<const Tensor*> ins) {
  if (!Tape::instance().enabled()) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

void record(const char* op, std::initializer_list<const Tensor*> ins, Tensor& out,
            std::function<void(TensorImpl&)> backward) {
  out.impl()->requires_grad = true;
  TapeNode node;
  node.op = op;
  for (const Tensor* t : ins) node.inputs.push_back(t->impl());
  node.out = out.impl();
  node.backward = std::move(backward);
  out.impl()->node_seq = Tape::instance().record(std::move(node));
}

// Trailing-axis broadcast plan: per-output-dim element strides into each input
// (0 on broadcast dims). Walk order is row-major over the output.
struct BcastPlan {
  Shape out;
  std::vector<int64_t> sa, sb;
  bool same = false;
};

BcastPlan make_bcast(const char* op, const Shape& a, const Shape& b) {
  BcastPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  int nd = static_cast<int>(std::max(a.size(), b.size()));
  p.out.assign(nd, 1);
  p.sa.assign(nd, 0);
  p.sb.assign(nd, 0);
  for (int d = nd - 1, ia = static_cast<int>(a.size()) - 1, ib = static_cast<int>(b.size()) - 1;
       d >= 0; --d, --ia, --ib) {
    int64_t ea = ia >= 0 ? a[ia] : 1;
    int64_t eb = ib >= 0 ? b[ib] : 1;
    HP_CHECK(ea == eb || ea == 1 || eb == 1,
             op << ": shapes " << shape_str(a) << " and " << shape_str(b) << " do not broadcast");
    p.out[d] = std::max(ea, eb);
  }
  int64_t ra = 1, rb = 1;  // running row-major strides
  for (int d = nd - 1, ia = static_cast<int>(a.size()) - 1, ib = static_cast<int>(b.size()) - 1;
       d >= 0; --d, --ia, --ib) {
    int64_t ea = ia >= 0 ? a[ia] : 1;
    int64_t eb = ib >= 0 ? b[ib] : 1;
    p.sa[d] = ea == 1 ? 0 : ra;
    p.sb[d] = eb == 1 ? 0 : rb;
    ra *= ea;
    rb *= eb;
  }
  return p;
}

template <class F>
void bcast_walk(const BcastPlan& p, F f) {
  int64_t n = shape_numel(p.out);
  if (p.same) {
    for (int64_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  int nd = static_cast<int>(p.out.size());
  std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
  int64_t ia = 0, ib = 0;
  for (int64_t io = 0; io < n; ++io) {
    f(io, ia, ib);
    for (int d = nd - 1; d >= 0; --d) {
      ++idx[d];
      ia += p.sa[d];
      ib += p.sb[d];
      if (idx[d] < p.out[d]) break;
      idx[d] = 0;
      ia -= p.sa[d] * p.out[d];
      ib -= p.sb[d] * p.out[d];
    }
  }
}

// Elementwise binary op with broadcast; DA/DB produce local derivatives from saved operand values.
template <class FwdF, class DAF, class DBF>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FwdF fwd, DAF da, DBF db) {
  HP_CHECK(a.dtype() == b.dtype(),
           name << ": dtype mismatch " << dtype_name(a.dtype()) << " vs " << dtype_name(b.dtype()));
  check_finite(name, a, "lhs");
  check_finite(name, b, "rhs");
  BcastPlan plan = make_bcast(name, a.shape(), b.shape());
  Tensor out = Tensor::empty(plan.out, a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const S* pa = a.impl()->template data_as<S>();
    const S* pb = b.impl()->template data_as<S>();
    S* po = out.impl()->template data_as<S>();
    bcast_walk(plan, [&](int64_t io, int64_t ia, int64_t ib) { po[io] = fwd(pa[ia], pb[ib]); });
  });
  if (grads_wanted({&a, &b})) {
    record(name, {&a, &b}, out,
           [ai = a.impl(), bi = b.impl(), plan, da, db](TensorImpl& o) {
             dispatch_dtype(o.dtype, [&](auto tag) {
               using S = decltype(tag);
               const S* g = o.grad_as<S>();
               const S* pa = ai->data_as<S>();
               const S* pb = bi->data_as<S>();
               if (ai->requires_grad) {
                 ai->ensure_grad();
                 S* ga = ai->grad_as<S>();
                 bcast_walk(plan, [&](int64_t io, int64_t ia, int64_t ib) {
                   ga[ia] += g[io] * static_cast<S>(da(pa[ia], pb[ib]));
                 });
               }
               if (bi->requires_grad) {
                 bi->ensure_grad();
                 S* gb = bi->grad_as<S>();
                 bcast_walk(plan, [&](int64_t io, int64_t ia, int64_t ib) {
                   gb[ib] += g[io] * static_cast<S>(db(pa[ia], pb[ib]));
                 });
               }
             });
           });
  }
  return out;
}

// Elementwise unary op; Dx computes the local derivative from the saved input value.
template <class FwdF, class DxF>
Tensor unary_op(const char* name, const Tensor& x, FwdF fwd, DxF dx) {
  check_finite(name, x, "input");
  Tensor out = Tensor::empty(x.shape(), x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const S* px = x.impl()->template data_as<S>();
    S* po = out.impl()->template data_as<S>();
    for (int64_t i = 0; i < x.numel(); ++i) po[i] = static_cast<S>(fwd(static_cast<double>(px[i])));
  });
  check_finite(name, out, "output");
  if (grads_wanted({&x})) {
    record(name, {&x}, out, [xi = x.impl(), dx](TensorImpl& o) {
      dispatch_dtype(o.dtype, [&](auto tag) {
        using S = decltype(tag);
        const S* g = o.grad_as<S>();
        const S* px = xi->data_as<S>();
        xi->ensure_grad();
        S* gx = xi->grad_as<S>();
        int64_t n = shape_numel(xi->shape);
        for (int64_t i = 0; i < n; ++i)
          gx[i] += g[i] * static_cast<S>(dx(static_cast<double>(px[i])));
      });
    });
  }
  return out;
}

// Deterministic single-threaded GEMM kernels. All accumulate into c, so
// callers zero-fill outputs and backward passes add straight into grad buffers.

// c[m,n] += a[m,k] * b[k,n]; ikj order, inner loop over contiguous rows.
template <class S>
void gemm_nn(int64_t m, int64_t k, int64_t n, const S* a, const S* b, S* c) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const S av = arow[p];
      const S* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Fixed-tree dot product: 8 independent accumulator lanes + sequential tail.
// The summation order is part of the op contract (bit-reproducible runs).
template <class S>
S dot_lanes(const S* x, const S* y, int64_t k) {
  S acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int64_t p = 0;
  for (; p + 8 <= k; p += 8)
    for (int l = 0; l < 8; ++l) acc[l] += x[p + l] * y[p + l];
  S head = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; p < k; ++p) head += x[p] * y[p];
  return head;
}

// c[m,n] += a[m,k] * b[n,k]^T; both operands row-contiguous over k.
template <class S>
void gemm_nt(int64_t m, int64_t k, int64_t n, const S* a, const S* b, S* c) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) crow[j] += dot_lanes(arow, b + j * k, k);
  }
}

// c[m,n] += a[kk,m]^T * b[kk,n]; axpy over contiguous b rows.
template <class S>
void gemm_tn(int64_t kk, int64_t m, int64_t n, const S* a, const S* b, S* c) {
  for (int64_t p = 0; p < kk; ++p) {
    const S* arow = a + p * m;
    const S* brow = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const S av = arow[i];
      S* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_backward(TensorImpl& o, const std::shared_ptr<TensorImpl>& ai,
                     const std::shared_ptr<TensorImpl>& bi, int64_t batches, int64_t m, int64_t k,
                     int64_t n, bool b_transposed) {
  dispatch_dtype(o.dtype, [&](auto tag) {
    using S = decltype(tag);
    const S* g = o.grad_as<S>();
    const S* pa = ai->data_as<S>();
    const S* pb = bi->data_as<S>();
    if (ai->requires_grad) {
      ai->ensure_grad();
      S* ga = ai->grad_as<S>();
      for (int64_t t = 0; t < batches; ++t) {
        const S* gt = g + t * m * n;
        const S* bt = pb + t * k * n;
        S* gat = ga + t * m * k;
        // dA = G * B^T (plain) or G * B (B stored as [n,k])
        if (b_transposed)
          gemm_nn(m, n, k, gt, bt, gat);
        else
          gemm_nt(m, n, k, gt, bt, gat);
      }
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      S* gb = bi->grad_as<S>();
      for (int64_t t = 0; t < batches; ++t) {
        const S* gt = g + t * m * n;
        const S* at = pa + t * m * k;
        S* gbt = gb + t * k * n;
        // dB = A^T * G; for the transposed layout dB[n,k] = G^T * A
        if (b_transposed)
          gemm_tn(m, n, k, gt, at, gbt);
        else
          gemm_tn(m, k, n, at, gt, gbt);
      }
    }
  });
}

Tensor matmul_family(const char* name, const Tensor& a, const Tensor& b, bool batched,
                     bool b_transposed) {
  HP_CHECK(a.dtype() == b.dtype(), name << ": dtype mismatch");
  int want = batched ? 3 : 2;
  HP_CHECK(a.ndim() == want && b.ndim() == want,
           name << ": expects rank-" << want << " operands, got " << shape_str(a.shape()) << " x "
                << shape_str(b.shape()));
  check_finite(name, a, "lhs");
  check_finite(name, b, "rhs");
  int64_t batches = batched ? a.shape()[0] : 1;
  if (batched)
    HP_CHECK(b.shape()[0] == batches, name << ": batch mismatch " << shape_str(a.shape()) << " x "
                                           << shape_str(b.shape()));
  int off = batched ? 1 : 0;
  int64_t m = a.shape()[off], k = a.shape()[off + 1];
  int64_t kb = b_transposed ? b.shape()[off + 1] : b.shape()[off];
  int64_t n = b_transposed ? b.shape()[off] : b.shape()[off + 1];
  HP_CHECK(kb == k, name << ": inner dimension mismatch " << shape_str(a.shape()) << " x "
                         << shape_str(b.shape()));
  Shape oshape = batched ? Shape{batches, m, n} : Shape{m, n};
  Tensor out = Tensor::zeros(oshape, a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const S* pa = a.impl()->template data_as<S>();
    const S* pb = b.impl()->template data_as<S>();
    S* po = out.impl()->template data_as<S>();
    for (int64_t t = 0; t < batches; ++t) {
      const S* at = pa + t * m * k;
      const S* bt = pb + t * k * n;
      S* ot = po + t * m * n;
      if (b_transposed)
        gemm_nt(m, k, n, at, bt, ot);
      else
        gemm_nn(m, k, n, at, bt, ot);
    }
  });
  if (grads_wanted({&a, &b})) {
    record(name, {&a, &b}, out,
           [ai = a.impl(), bi = b.impl(), batches, m, k, n, b_transposed](TensorImpl& o) {
             matmul_backward(o, ai, bi, batches, m, k, n, b_transposed);
           });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](auto x, auto y) { return x + y; }, [](auto, auto) { return 1.0; },
      [](auto, auto) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](auto x, auto y) { return x - y; }, [](auto, auto) { return 1.0; },
      [](auto, auto) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](auto x, auto y) { return x * y; },
      [](auto, auto y) { return static_cast<double>(y); },
      [](auto x, auto) { return static_cast<double>(x); });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](auto x, auto y) { return x / y; },
      [](auto, auto y) { return 1.0 / static_cast<double>(y); },
      [](auto x, auto y) {
        double d = static_cast<double>(y);
        return -static_cast<double>(x) / (d * d);
      });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op(
      "add_scalar", x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary_op(
      "mul_scalar", x, [c](double v) { return v * c; }, [c](double) { return c; });
}

Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_family("matmul", a, b, false, false); }
Tensor bmm(const Tensor& a, const Tensor& b) { return matmul_family("bmm", a, b, true, false); }
Tensor bmm_nt(const Tensor& a, const Tensor& b) { return matmul_family("bmm_nt", a, b, true, true); }

Tensor conv1d(const Tensor& x, const Tensor& w, int stride) {
  HP_CHECK(x.dtype() == w.dtype(), "conv1d: dtype mismatch");
  HP_CHECK(x.ndim() == 3 && w.ndim() == 3, "conv1d: expects x [B,Ci,T], w [Co,Ci,K], got "
                                               << shape_str(x.shape()) << " and "
                                               << shape_str(w.shape()));
  HP_CHECK(stride >= 1, "conv1d: stride must be >= 1, got " << stride);
  int64_t B = x.shape()[0], Ci = x.shape()[1], T = x.shape()[2];
  int64_t Co = w.shape()[0], K = w.shape()[2];
  HP_CHECK(w.shape()[1] == Ci,
           "conv1d: channel mismatch x " << shape_str(x.shape()) << " w " << shape_str(w.shape()));
  HP_CHECK(T >= K, "conv1d: input length " << T << " shorter than kernel " << K);
  int64_t To = (T - K) / stride + 1;
  check_finite("conv1d", x, "input");
  check_finite("conv1d", w, "weight");
  Tensor out = Tensor::zeros({B, Co, To}, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const S* px = x.impl()->template data_as<S>();
    const S* pw = w.impl()->template data_as<S>();
    S* po = out.impl()->template data_as<S>();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t co = 0; co < Co; ++co) {
        S* orow = po + (b * Co + co) * To;
        for (int64_t ci = 0; ci < Ci; ++ci) {
          const S* xrow = px + (b * Ci + ci) * T;
          const S* wrow = pw + (co * Ci + ci) * K;
          for (int64_t kk = 0; kk < K; ++kk) {
            const S wv = wrow[kk];
            const S* xoff = xrow + kk;
            for (int64_t t = 0; t < To; ++t) orow[t] += wv * xoff[t * stride];
          }
        }
      }
  });
  if (grads_wanted({&x, &w})) {
    record("conv1d", {&x, &w}, out,
           [xi = x.impl(), wi = w.impl(), B, Ci, T, Co, K, To, stride](TensorImpl& o) {
             dispatch_dtype(o.dtype, [&](auto tag) {
               using S = decltype(tag);
               const S* g = o.grad_as<S>();
               const S* px = xi->data_as<S>();
               const S* pw = wi->data_as<S>();
               if (xi->requires_grad) {
                 xi->ensure_grad();
                 S* gx = xi->grad_as<S>();
                 for (int64_t b = 0; b < B; ++b)
                   for (int64_t co = 0; co < Co; ++co) {
                     const S* grow = g + (b * Co + co) * To;
                     for (int64_t ci = 0; ci < Ci; ++ci) {
                       S* gxrow = gx + (b * Ci + ci) * T;
                       const S* wrow = pw + (co * Ci + ci) * K;
                       for (int64_t kk = 0; kk < K; ++kk) {
                         const S wv = wrow[kk];
                         S* gxoff = gxrow + kk;
                         for (int64_t t = 0; t < To; ++t) gxoff[t * stride] += wv * grow[t];
                       }
                     }
                   }
               }
               if (wi->requires_grad) {
                 wi->ensure_grad();
                 S* gw = wi->grad_as<S>();
                 for (int64_t b = 0; b < B; ++b)
                   for (int64_t co = 0; co < Co; ++co) {
                     const S* grow = g + (b * Co + co) * To;
                     for (int64_t ci = 0; ci < Ci; ++ci) {
                       const S* xrow = px + (b * Ci + ci) * T;
                       S* gwrow = gw + (co * Ci + ci) * K;
                       for (int64_t kk = 0; kk < K; ++kk) {
                         const S* xoff = xrow + kk;
                         S acc = 0;
                         for (int64_t t = 0; t < To; ++t) acc += grow[t] * xoff[t * stride];
                         gwrow[kk] += acc;
                       }
                     }
                   }
               }
             });
           });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  auto f = [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); };
  return unary_op("sigmoid", x, f, [f](double v) {
    double s = f(v);
    return s * (1.0 - s);
  });
}

Tensor tanh_t(const Tensor& x) {
  return unary_op(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double v) {
        double t = std::tanh(v);
        return 1.0 - t * t;
      });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return unary_op(
      "gelu", x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))); },
      [](double v) {
        double t = std::tanh(kC * (v + kA * v * v * v));
        double du = kC * (1.0 + 3.0 * kA * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      });
}

Tensor exp_t(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

Tensor log_t(const Tensor& x) {
  return unary_op(
      "log", x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

Tensor sqrt_t(const Tensor& x) {
  return unary_op(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double v) {
        double r = std::sqrt(v);
        return r > 0 ? 0.5 / r : 0.0;
      });
}

Tensor softplus(const Tensor& x) {
  return unary_op(
      "softplus", x,
      [](double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); });
}

Tensor pow_scalar(const Tensor& x, double p) {
  return unary_op(
      "pow_scalar", x, [p](double v) { return std::pow(v, p); },
      [p](double v) { return p * std::pow(v, p - 1.0); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  HP_CHECK(lo <= hi, "clamp: lo " << lo << " > hi " << hi);
  return unary_op(
      "clamp", x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](double v) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor softmax_last(const Tensor& x) {
  HP_CHECK(x.ndim() >= 1, "softmax_last: needs at least rank 1");
  check_finite("softmax_last", x, "input");
  int64_t D = x.shape().back();
  int64_t rows = x.numel() / D;
  Tensor out = Tensor::empty(x.shape(), x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const S* px = x.impl()->template data_as<S>();
    S* po = out.impl()->template data_as<S>();
    for (int64_t r = 0; r < rows; ++r) {
      const S* in = px + r * D;
      S* y = po + r * D;
      S m = in[0];
      for (int64_t j = 1; j < D; ++j) m = std::max(m, in[j]);
      S sum = 0;
      for (int64_t j = 0; j < D; ++j) {
        y[j] = std::exp(in[j] - m);
        sum += y[j];
      }
      const S inv = S(1) / sum;
      for (int64_t j = 0; j < D; ++j) y[j] *= inv;
    }
  });
  if (grads_wanted({&x})) {
    record("softmax_last", {&x}, out, [xi = x.impl(), yk = out.impl(), D, rows](TensorImpl& o) {
      dispatch_dtype(o.dtype, [&](auto tag) {
        using S = decltype(tag);
        const S* g = o.grad_as<S>();
        const S* y = yk->data_as<S>();
        xi->ensure_grad();
        S* gx = xi->grad_as<S>();
        for (int64_t r = 0; r < rows; ++r) {
          const S* gr = g + r * D;
          const S* yr = y + r * D;
          S dot = 0;
          for (int64_t j = 0; j < D; ++j) dot += gr[j] * yr[j];
          S* gxr = gx + r * D;
          for (int64_t j = 0; j < D; ++j) gxr[j] += yr[j] * (gr[j] - dot);
        }
      });
    });
  }
  return out;
}

Tensor layer_norm_last(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  HP_CHECK(x.ndim() >= 1, "layer_norm_last: needs at least rank 1");
  int64_t D = x.shape().back();
  HP_CHECK(gamma.ndim() == 1 && gamma.shape()[0] == D && beta.ndim() == 1 && beta.shape()[0] == D,
           "layer_norm_last: scale/shift must be [" << D << "], got " << shape_str(gamma.shape())
                                                    << " and " << shape_str(beta.shape()));
  HP_CHECK(x.dtype() == gamma.dtype() && x.dtype() == beta.dtype(), "layer_norm_last: dtype mismatch");
  check_finite("layer_norm_last", x, "input");
  int64_t rows = x.numel() / D;
  Tensor out = Tensor::empty(x.shape(), x.dtype());
  // Saved for backward: normalized activations and per-row inverse stddev.
  Tensor xhat = Tensor::empty(x.shape(), x.dtype());
  Tensor rstd = Tensor::empty({rows}, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const S* px = x.impl()->template data_as<S>();
    const S* pg = gamma.impl()->template data_as<S>();
    const S* pb = beta.impl()->template data_as<S>();
    S* po = out.impl()->template data_as<S>();
    S* ph = xhat.impl()->template data_as<S>();
    S* pr = rstd.impl()->template data_as<S>();
    for (int64_t r = 0; r < rows; ++r) {
      const S* in = px + r * D;
      S mean = 0;
      for (int64_t j = 0; j < D; ++j) mean += in[j];
      mean /= static_cast<S>(D);
      S var = 0;
      for (int64_t j = 0; j < D; ++j) {
        const S d = in[j] - mean;
        var += d * d;
      }
      var /= static_cast<S>(D);
      const S inv = S(1) / std::sqrt(var + static_cast<S>(eps));
      pr[r] = inv;
      S* h = ph + r * D;
      S* y = po + r * D;
      for (int64_t j = 0; j < D; ++j) {
        h[j] = (in[j] - mean) * inv;
        y[j] = h[j] * pg[j] + pb[j];
      }
    }
  });
  if (grads_wanted({&x, &gamma, &beta})) {
    record("layer_norm_last", {&x, &gamma, &beta}, out,
           [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), hi = xhat.impl(),
            ri = rstd.impl(), D, rows](TensorImpl& o) {
             dispatch_dtype(o.dtype, [&](auto tag) {
               using S = decltype(tag);
               const S* g = o.grad_as<S>();
               const S* h = hi->data_as<S>();
               const S* inv = ri->data_as<S>();
               const S* pg = gi->data_as<S>();
               if (gi->requires_grad) {
                 gi->ensure_grad();
                 S* gg = gi->grad_as<S>();
                 for (int64_t r = 0; r < rows; ++r) {
                   const S* gr = g + r * D;
                   const S* hr = h + r * D;
                   for (int64_t j = 0; j < D; ++j) gg[j] += gr[j] * hr[j];
                 }
               }
               if (bi->requires_grad) {
                 bi->ensure_grad();
                 S* gb = bi->grad_as<S>();
                 for (int64_t r = 0; r < rows; ++r) {
                   const S* gr = g + r * D;
                   for (int64_t j = 0; j < D; ++j) gb[j] += gr[j];
                 }
               }
               if (xi->requires_grad) {
                 xi->ensure_grad();
                 S* gx = xi->grad_as<S>();
                 for (int64_t r = 0; r < rows; ++r) {
                   const S* gr = g + r * D;
                   const S* hr = h + r * D;
                   S m1 = 0, m2 = 0;
                   for (int64_t j = 0; j < D; ++j) {
                     const S t = gr[j] * pg[j];
                     m1 += t;
                     m2 += t * hr[j];
                   }
                   m1 /= static_cast<S>(D);
                   m2 /= static_cast<S>(D);
                   S* gxr = gx + r * D;
                   for (int64_t j = 0; j < D; ++j)
                     gxr[j] += inv[r] * (gr[j] * pg[j] - m1 - hr[j] * m2);
                 }
               }
             });
           });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  check_finite("sum_all", x, "input");
  Tensor out = Tensor::empty({}, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const S* px = x.impl()->template data_as<S>();
    S acc = 0;
    for (int64_t i = 0; i < x.numel(); ++i) acc += px[i];
    out.impl()->template data_as<S>()[0] = acc;
  });
  if (grads_wanted({&x})) {
    record("sum_all", {&x}, out, [xi = x.impl()](TensorImpl& o) {
      dispatch_dtype(o.dtype, [&](auto tag) {
        using S = decltype(tag);
        const S gv = o.grad_as<S>()[0];
        xi->ensure_grad();
        S* gx = xi->grad_as<S>();
        int64_t n = shape_numel(xi->shape);
        for (int64_t i = 0; i < n; ++i) gx[i] += gv;
      });
    });
  }
  return out;
}

Tensor mean_all(const Tensor& x) {
  HP_CHECK(x.numel() > 0, "mean_all: empty tensor");
  return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_last(const Tensor& x) {
  HP_CHECK(x.ndim() >= 1, "sum_last: needs at least rank 1");
  int64_t D = x.shape().back();
  int64_t rows = x.numel() / D;
  Shape oshape(x.shape().begin(), x.shape().end() - 1);
  Tensor out = Tensor::empty(oshape, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const S* px = x.impl()->template data_as<S>();
    S* po = out.impl()->template data_as<S>();
    for (int64_t r = 0; r < rows; ++r) {
      const S* in = px + r * D;
      S acc = 0;
      for (int64_t j = 0; j < D; ++j) acc += in[j];
      po[r] = acc;
    }
  });
  if (grads_wanted({&x})) {
    record("sum_last", {&x}, out, [xi = x.impl(), D, rows](TensorImpl& o) {
      dispatch_dtype(o.dtype, [&](auto tag) {
        using S = decltype(tag);
        const S* g = o.grad_as<S>();
        xi->ensure_grad();
        S* gx = xi->grad_as<S>();
        for (int64_t r = 0; r < rows; ++r) {
          const S gv = g[r];
          S* gxr = gx + r * D;
          for (int64_t j = 0; j < D; ++j) gxr[j] += gv;
        }
      });
    });
  }
  return out;
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  HP_CHECK(!parts.empty(), "concat_last: no inputs");
  const Tensor& first = parts[0];
  Shape base = first.shape();
  HP_CHECK(!base.empty(), "concat_last: needs at least rank 1");
  int64_t total = 0;
  for (const Tensor& p : parts) {
    HP_CHECK(p.dtype() == first.dtype(), "concat_last: dtype mismatch");
    HP_CHECK(p.ndim() == first.ndim(), "concat_last: rank mismatch");
    for (int d = 0; d + 1 < first.ndim(); ++d)
      HP_CHECK(p.shape()[d] == base[d], "concat_last: leading shape mismatch "
                                            << shape_str(p.shape()) << " vs " << shape_str(base));
    total += p.shape().back();
  }
  Shape oshape = base;
  oshape.back() = total;
  int64_t rows = shape_numel(oshape) / total;
  Tensor out = Tensor::empty(oshape, first.dtype());
  std::vector<int64_t> widths, offsets;
  int64_t off = 0;
  for (const Tensor& p : parts) {
    widths.push_back(p.shape().back());
    offsets.push_back(off);
    off += p.shape().back();
  }
  dispatch_dtype(first.dtype(), [&](auto tag) {
    using S = decltype(tag);
    S* po = out.impl()->template data_as<S>();
    for (size_t pi = 0; pi < parts.size(); ++pi) {
      const S* ps = parts[pi].impl()->template data_as<S>();
      const int64_t w = widths[pi];
      for (int64_t r = 0; r < rows; ++r)
        std::memcpy(po + r * total + offsets[pi], ps + r * w, sizeof(S) * static_cast<size_t>(w));
    }
  });
  bool any_rg = false;
  for (const Tensor& p : parts) any_rg = any_rg || p.requires_grad();
  if (Tape::instance().enabled() && any_rg) {
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const Tensor& p : parts) impls.push_back(p.impl());
    out.impl()->requires_grad = true;
    TapeNode node;
    node.op = "concat_last";
    node.inputs = impls;
    node.out = out.impl();
    node.backward = [impls, widths, offsets, total, rows](TensorImpl& o) {
      dispatch_dtype(o.dtype, [&](auto tag) {
        using S = decltype(tag);
        const S* g = o.grad_as<S>();
        for (size_t pi = 0; pi < impls.size(); ++pi) {
          if (!impls[pi]->requires_grad) continue;
          impls[pi]->ensure_grad();
          S* gp = impls[pi]->grad_as<S>();
          const int64_t w = widths[pi];
          for (int64_t r = 0; r < rows; ++r) {
            const S* gr = g + r * total + offsets[pi];
            S* gpr = gp + r * w;
            for (int64_t j = 0; j < w; ++j) gpr[j] += gr[j];
          }
        }
      });
    };
    out.impl()->node_seq = Tape::instance().record(std::move(node));
  }
  return out;
}

namespace {

// Copy plan for slice: treat x as [outer, extent, inner]; take [start, start+len) of the middle.
struct SlicePlan {
  int64_t outer = 1, extent = 1, inner = 1, start = 0, len = 0;
};

SlicePlan make_slice_plan(const Shape& shape, int axis, int64_t start, int64_t len) {
  HP_CHECK(axis >= 0 && axis < static_cast<int>(shape.size()),
           "slice: axis " << axis << " out of range for " << shape_str(shape));
  HP_CHECK(start >= 0 && len >= 1 && start + len <= shape[axis],
           "slice: range [" << start << "," << (start + len) << ") invalid for axis " << axis
                            << " of " << shape_str(shape));
  SlicePlan p;
  p.start = start;
  p.len = len;
  p.extent = shape[axis];
  for (int d = 0; d < axis; ++d) p.outer *= shape[d];
  for (size_t d = static_cast<size_t>(axis) + 1; d < shape.size(); ++d) p.inner *= shape[d];
  return p;
}

}  // namespace

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len) {
  SlicePlan p = make_slice_plan(x.shape(), axis, start, len);
  Shape oshape = x.shape();
  oshape[axis] = len;
  Tensor out = Tensor::empty(oshape, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const S* px = x.impl()->template data_as<S>();
    S* po = out.impl()->template data_as<S>();
    for (int64_t ou = 0; ou < p.outer; ++ou)
      std::memcpy(po + ou * p.len * p.inner, px + (ou * p.extent + p.start) * p.inner,
                  sizeof(S) * static_cast<size_t>(p.len * p.inner));
  });
  if (grads_wanted({&x})) {
    record("slice", {&x}, out, [xi = x.impl(), p](TensorImpl& o) {
      dispatch_dtype(o.dtype, [&](auto tag) {
        using S = decltype(tag);
        const S* g = o.grad_as<S>();
        xi->ensure_grad();
        S* gx = xi->grad_as<S>();
        for (int64_t ou = 0; ou < p.outer; ++ou) {
          const S* gr = g + ou * p.len * p.inner;
          S* gxr = gx + (ou * p.extent + p.start) * p.inner;
          for (int64_t j = 0; j < p.len * p.inner; ++j) gxr[j] += gr[j];
        }
      });
    });
  }
  return out;
}

namespace {

// Row-major index remap for permute: out[j] = x[map[j]].
std::vector<int64_t> permute_map(const Shape& in_shape, const std::vector<int>& perm) {
  int nd = static_cast<int>(in_shape.size());
  Shape oshape(static_cast<size_t>(nd));
  for (int d = 0; d < nd; ++d) oshape[d] = in_shape[perm[d]];
  std::vector<int64_t> in_strides(static_cast<size_t>(nd), 1);
  for (int d = nd - 2; d >= 0; --d) in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
  std::vector<int64_t> strides_for_out(static_cast<size_t>(nd));
  for (int d = 0; d < nd; ++d) strides_for_out[d] = in_strides[perm[d]];
  int64_t n = shape_numel(oshape);
  std::vector<int64_t> map(static_cast<size_t>(n));
  std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
  int64_t src = 0;
  for (int64_t o = 0; o < n; ++o) {
    map[static_cast<size_t>(o)] = src;
    for (int d = nd - 1; d >= 0; --d) {
      ++idx[d];
      src += strides_for_out[d];
      if (idx[d] < oshape[d]) break;
      idx[d] = 0;
      src -= strides_for_out[d] * oshape[d];
    }
  }
  return map;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  int nd = x.ndim();
  HP_CHECK(static_cast<int>(perm.size()) == nd, "permute: perm size " << perm.size()
                                                                      << " != rank " << nd);
  std::vector<bool> seen(static_cast<size_t>(nd), false);
  for (int p : perm) {
    HP_CHECK(p >= 0 && p < nd && !seen[static_cast<size_t>(p)], "permute: invalid permutation");
    seen[static_cast<size_t>(p)] = true;
  }
  Shape oshape(static_cast<size_t>(nd));
  for (int d = 0; d < nd; ++d) oshape[d] = x.shape()[perm[d]];
  auto map = std::make_shared<std::vector<int64_t>>(permute_map(x.shape(), perm));
  Tensor out = Tensor::empty(oshape, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const S* px = x.impl()->template data_as<S>();
    S* po = out.impl()->template data_as<S>();
    for (int64_t o = 0; o < out.numel(); ++o) po[o] = px[(*map)[static_cast<size_t>(o)]];
  });
  if (grads_wanted({&x})) {
    record("permute", {&x}, out, [xi = x.impl(), map](TensorImpl& o) {
      dispatch_dtype(o.dtype, [&](auto tag) {
        using S = decltype(tag);
        const S* g = o.grad_as<S>();
        xi->ensure_grad();
        S* gx = xi->grad_as<S>();
        int64_t n = static_cast<int64_t>(map->size());
        for (int64_t o2 = 0; o2 < n; ++o2) gx[(*map)[static_cast<size_t>(o2)]] += g[o2];
      });
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  HP_CHECK(shape_numel(new_shape) == x.numel(), "reshape: cannot view " << shape_str(x.shape())
                                                                        << " as "
                                                                        << shape_str(new_shape));
  Tensor out = Tensor::empty(new_shape, x.dtype());
  std::memcpy(out.impl()->data.data(), x.impl()->data.data(), x.impl()->data.size());
  if (grads_wanted({&x})) {
    record("reshape", {&x}, out, [xi = x.impl()](TensorImpl& o) {
      dispatch_dtype(o.dtype, [&](auto tag) {
        using S = decltype(tag);
        const S* g = o.grad_as<S>();
        xi->ensure_grad();
        S* gx = xi->grad_as<S>();
        int64_t n = shape_numel(xi->shape);
        for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
      });
    });
  }
  return out;
}

Tensor gather_last(const Tensor& x, const std::vector<int64_t>& idx) {
  HP_CHECK(x.ndim() == 2, "gather_last: expects [rows, cols], got " << shape_str(x.shape()));
  int64_t B = x.shape()[0], C = x.shape()[1];
  HP_CHECK(static_cast<int64_t>(idx.size()) == B,
           "gather_last: index count " << idx.size() << " != rows " << B);
  for (int64_t b = 0; b < B; ++b)
    HP_CHECK(idx[static_cast<size_t>(b)] >= 0 && idx[static_cast<size_t>(b)] < C,
             "gather_last: index " << idx[static_cast<size_t>(b)] << " out of range [0," << C
                                   << ") at row " << b);
  Tensor out = Tensor::empty({B}, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const S* px = x.impl()->template data_as<S>();
    S* po = out.impl()->template data_as<S>();
    for (int64_t b = 0; b < B; ++b) po[b] = px[b * C + idx[static_cast<size_t>(b)]];
  });
  if (grads_wanted({&x})) {
    record("gather_last", {&x}, out, [xi = x.impl(), idx, B, C](TensorImpl& o) {
      dispatch_dtype(o.dtype, [&](auto tag) {
        using S = decltype(tag);
        const S* g = o.grad_as<S>();
        xi->ensure_grad();
        S* gx = xi->grad_as<S>();
        for (int64_t b = 0; b < B; ++b) gx[b * C + idx[static_cast<size_t>(b)]] += g[b];
      });
    });
  }
  return out;
}

Tensor one_hot(const std::vector<int64_t>& idx, int64_t classes, Dtype dt) {
  HP_CHECK(classes >= 1, "one_hot: classes must be >= 1");
  int64_t B = static_cast<int64_t>(idx.size());
  Tensor out = Tensor::zeros({B, classes}, dt);
  dispatch_dtype(dt, [&](auto tag) {
    using S = decltype(tag);
    S* po = out.impl()->template data_as<S>();
    for (int64_t b = 0; b < B; ++b) {
      int64_t c = idx[static_cast<size_t>(b)];
      HP_CHECK(c >= 0 && c < classes, "one_hot: index " << c << " out of range [0," << classes
                                                        << ") at row " << b);
      po[b * classes + c] = S(1);
    }
  });
  return out;
}

}  // namespace hp::ops
