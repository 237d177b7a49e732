#pragma once

#include <vector>

#include "tensor.hpp"

// Forward ops over Tensors. Every op validates shapes, computes the forward
// value, and records a tape node when grad tracking is on and any input
// requires grad. Broadcasting follows trailing-axis alignment; matmul family
// takes exact shapes (reshape explicitly instead).

namespace hp::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // elementwise, broadcast like mul
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n] -> [m,n]
Tensor bmm(const Tensor& a, const Tensor& b);     // [N,m,k]x[N,k,n] -> [N,m,n]
Tensor bmm_nt(const Tensor& a, const Tensor& b);  // [N,m,k]x[N,n,k] -> [N,m,n]

// Valid (no padding) 1-d cross-correlation with stride: [B,Ci,T]x[Co,Ci,K] -> [B,Co,(T-K)/stride+1]
Tensor conv1d(const Tensor& x, const Tensor& w, int stride);

Tensor sigmoid(const Tensor& x);
Tensor tanh_t(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor exp_t(const Tensor& x);
Tensor log_t(const Tensor& x);
Tensor sqrt_t(const Tensor& x);     // grad defined 0 where the output is exactly 0
Tensor softplus(const Tensor& x);   // log(1+e^x), overflow-safe
Tensor pow_scalar(const Tensor& x, double p);
Tensor clamp(const Tensor& x, double lo, double hi);  // subgradient 0 at the exact boundaries

Tensor softmax_last(const Tensor& x);
Tensor layer_norm_last(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor sum_all(const Tensor& x);   // -> rank-0 scalar
Tensor mean_all(const Tensor& x);  // -> rank-0 scalar
Tensor sum_last(const Tensor& x);  // [...,n] -> [...]

Tensor concat_last(const std::vector<Tensor>& parts);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor reshape(const Tensor& x, Shape new_shape);

// Row-wise column pick: x [B,C] with idx[B] -> [B]. Errors on out-of-range indices.
Tensor gather_last(const Tensor& x, const std::vector<int64_t>& idx);
// Constant [B,C] indicator matrix (no grad).
Tensor one_hot(const std::vector<int64_t>& idx, int64_t classes, Dtype dt);

}  // namespace hp::ops
