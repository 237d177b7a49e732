#pragma once

#include <vector>

#include "tensor.hpp"

// Task losses. The verification head is additive-angular-margin softmax over
// cosine logits; the spoof head is plain binary cross-entropy on a linear
// logit. Both are pure graph builders over the caller's tensors.

namespace hp::obj {

struct AamParams {
  double margin = 0.2;  // in [0, pi/2)
  double scale = 32.0;  // > 0

  void validate() const;
};

// Rows scaled to unit L2 norm, gradient flowing through the normalization.
Tensor normalize_rows(const Tensor& x);

// embeddings [B,E], class_w [C,E] (unnormalized master weights), labels [B].
// Cosine logits; the label class gets cos(theta + margin) via the identity
// cos(t+m) = cos t * cos m - sin t * sin m with sin t = sqrt(max(0, 1-cos^2)).
Tensor aam_loss(const Tensor& embeddings, const std::vector<int64_t>& labels,
                const Tensor& class_w, const AamParams& p = {});

// Linear spoof head: embeddings [B,E] -> logits [B].
Tensor binary_logits(const Tensor& embeddings, const Tensor& w, const Tensor& b);

// Mean of log(1+exp(-y*logit)) with y = +-1 mapped from {0,1} labels.
Tensor bce_loss(const Tensor& logits, const std::vector<int>& labels01);

}  // namespace hp::obj
