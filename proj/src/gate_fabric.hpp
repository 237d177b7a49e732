#pragma once

#include <string>
#include <vector>

#include "hard_concrete.hpp"
#include "ops.hpp"
#include "tensor.hpp"

// Gate bookkeeping: every model parameter sits in exactly one bucket — fixed
// (never removable), owned by one gate (removed iff that gate is off), or
// shared by a gate pair (removed unless both gates are on). Expected sparsity
// is then an exact expectation under gate independence, and binary plans get
// exact integer counts.

namespace hp::fabric {

enum class Kind : uint8_t { ConvChannel = 0, MhsaHead = 1, FfnNeuron = 2 };

const char* kind_name(Kind k);

struct GateBank {
  std::string name;        // stable id, e.g. "conv0" or "block2.heads"
  Kind kind;
  int layer;               // conv layer index or transformer block index
  int64_t owned_per_gate;  // params removed with each gate of this bank alone
  Tensor log_alpha;        // [gates], requires_grad leaf

  int64_t gates() const { return log_alpha.numel(); }
};

// Parameters jointly controlled by every (gate a, gate b) pair across two
// banks: per_pair params survive iff both gates stay on.
struct SharedBlock {
  int bank_a;
  int bank_b;
  int64_t per_pair;
};

class GateFabric {
 public:
  // Asserts accounting completeness against the model's exact parameter count.
  GateFabric(std::vector<GateBank> banks, std::vector<SharedBlock> shared, int64_t fixed_params,
             int64_t model_param_count, hc::Params gate_params = {});

  const std::vector<GateBank>& banks() const { return banks_; }
  std::vector<GateBank>& banks() { return banks_; }
  const std::vector<SharedBlock>& shared() const { return shared_; }
  int64_t fixed_params() const { return fixed_; }
  int64_t total_params() const { return total_; }
  const hc::Params& gate_params() const { return hc_; }

  // Differentiable scalar graphs over the banks' log_alpha leaves.
  Tensor expected_remaining() const;
  Tensor expected_sparsity() const;
  double expected_sparsity_value() const;  // detached convenience

  // Exact integer accounting for a binary keep decision (one byte per gate,
  // outer vector parallel to banks()).
  int64_t remaining_params(const std::vector<std::vector<uint8_t>>& keep) const;
  double realized_sparsity(const std::vector<std::vector<uint8_t>>& keep) const;

  std::vector<Tensor> gate_tensors() const;  // log_alpha leaves, bank order

 private:
  std::vector<GateBank> banks_;
  std::vector<SharedBlock> shared_;
  int64_t fixed_ = 0;
  int64_t total_ = 0;
  hc::Params hc_;
};

}  // namespace hp::fabric
