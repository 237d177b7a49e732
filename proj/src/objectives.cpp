#include "objectives.hpp"

#include <cmath>

#include "ops.hpp"

namespace hp::obj {

namespace O = hp::ops;

void AamParams::validate() const {
  HP_CHECK(margin >= 0.0 && margin < 1.5707963267948966,
           "margin must lie in [0, pi/2), got " << margin);
  HP_CHECK(scale > 0.0, "scale must be positive, got " << scale);
}

Tensor normalize_rows(const Tensor& x) {
  HP_CHECK(x.defined() && x.ndim() == 2, "normalize_rows expects a matrix");
  Tensor norms = O::sqrt_t(O::sum_last(O::mul(x, x)));  // [N]
  return O::div(x, O::reshape(norms, {x.dim(0), 1}));
}

Tensor aam_loss(const Tensor& embeddings, const std::vector<int64_t>& labels,
                const Tensor& class_w, const AamParams& p) {
  p.validate();
  HP_CHECK(embeddings.defined() && embeddings.ndim() == 2, "embeddings must be [batch, dim]");
  HP_CHECK(class_w.defined() && class_w.ndim() == 2 && class_w.dim(1) == embeddings.dim(1),
           "class weights must be [classes, " << embeddings.dim(1) << "]");
  const int64_t B = embeddings.dim(0), C = class_w.dim(0);
  HP_CHECK(static_cast<int64_t>(labels.size()) == B, "one label per embedding row");
  for (int64_t y : labels)
    HP_CHECK(y >= 0 && y < C, "label " << y << " out of range for " << C << " classes");

  Tensor cos = O::matmul(normalize_rows(embeddings), O::permute(normalize_rows(class_w), {1, 0}));
  Tensor sin = O::sqrt_t(O::clamp(O::add_scalar(O::neg(O::mul(cos, cos)), 1.0), 0.0, 1.0));
  Tensor margined = O::sub(O::mul_scalar(cos, std::cos(p.margin)),
                           O::mul_scalar(sin, std::sin(p.margin)));
  Tensor onehot = O::one_hot(labels, C, cos.dtype());
  Tensor logits = O::mul_scalar(O::add(cos, O::mul(onehot, O::sub(margined, cos))), p.scale);
  Tensor picked = O::gather_last(O::log_t(O::softmax_last(logits)), labels);
  return O::neg(O::mean_all(picked));
}

Tensor binary_logits(const Tensor& embeddings, const Tensor& w, const Tensor& b) {
  HP_CHECK(embeddings.defined() && embeddings.ndim() == 2, "embeddings must be [batch, dim]");
  HP_CHECK(w.defined() && w.ndim() == 1 && w.numel() == embeddings.dim(1),
           "spoof head weight must match embedding dim");
  HP_CHECK(b.defined() && b.numel() == 1, "spoof head bias must be a single value");
  Tensor z = O::matmul(embeddings, O::reshape(w, {w.numel(), 1}));
  return O::add(O::reshape(z, {embeddings.dim(0)}), b);
}

Tensor bce_loss(const Tensor& logits, const std::vector<int>& labels01) {
  HP_CHECK(logits.defined() && logits.ndim() == 1, "logits must be [batch]");
  const int64_t B = logits.numel();
  HP_CHECK(static_cast<int64_t>(labels01.size()) == B, "one label per logit");
  std::vector<double> ysign(labels01.size());
  for (size_t i = 0; i < labels01.size(); ++i) {
    HP_CHECK(labels01[i] == 0 || labels01[i] == 1, "binary labels must be 0 or 1");
    ysign[i] = labels01[i] == 1 ? -1.0 : 1.0;  // softplus(-y * logit)
  }
  Tensor flip = Tensor::from_vector({B}, ysign, logits.dtype(), false);
  return O::mean_all(O::softplus(O::mul(logits, flip)));
}

}  // namespace hp::obj
