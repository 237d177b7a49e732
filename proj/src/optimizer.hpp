#pragma once

#include <vector>

#include "tensor.hpp"

// Adaptive-moment descent with decoupled weight decay, grouped so model
// weights, gate logits, and anything else can run at different rates. Moments
// are kept in double regardless of parameter dtype and update order is fixed,
// so training stays bit-deterministic.

namespace hp::optim {

struct GroupConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled: p -= lr * wd * p

  void validate() const;
};

class AdamW {
 public:
  struct Slot {
    Tensor t;
    std::vector<double> m, v;
  };
  struct Group {
    GroupConfig cfg;
    std::vector<Slot> slots;
  };

  // Returns the group index. Parameters keep their identity (shared storage).
  int add_group(const std::vector<Tensor>& params, GroupConfig cfg);

  void zero_grad();
  void step();  // missing grad buffers count as zero gradient

  int64_t steps() const { return steps_; }

  // Checkpoint plumbing: moments and step counter are the whole state.
  std::vector<Group>& groups() { return groups_; }
  const std::vector<Group>& groups() const { return groups_; }
  void set_steps(int64_t s) { steps_ = s; }

 private:
  std::vector<Group> groups_;
  int64_t steps_ = 0;
};

// L2 norm over every gradient element of params (absent grads contribute 0).
double global_grad_norm(const std::vector<Tensor>& params);

// Scales all gradients by max_norm/norm when norm exceeds max_norm.
// Returns the pre-clip norm.
double clip_global_norm(const std::vector<Tensor>& params, double max_norm);

}  // namespace hp::optim
