#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "gate_fabric.hpp"
#include "model.hpp"

// Gate finalization: freeze the stochastic gates into a binary keep/drop
// decision, physically slice every dropped structure out of the weights, and
// verify the dense result against the gated reference.

namespace hp::compact {

// One byte per gate; outer vector parallel to the fabric's banks.
using KeepMask = std::vector<std::vector<uint8_t>>;

// Keeps every gate whose deterministic value is positive. If that misses the
// target sparsity by more than 0.01, gates are re-ranked by deterministic
// value and the cut moves to the achievable sparsity nearest the target,
// with exact parameter counts (shared slices included) evaluated per cut;
// ties keep more gates.
KeepMask binarize(const fabric::GateFabric& fab, double target);

struct CompactionPlan {
  std::vector<std::vector<int64_t>> conv_kept;  // per conv layer: kept channel indices
  std::vector<std::vector<int64_t>> head_kept;  // per block: kept head indices
  std::vector<std::vector<int64_t>> ffn_kept;   // per block: kept neuron indices
  int64_t realized_params = 0;
  double realized_sparsity = 0.0;
  int64_t realized_flops = 0;  // analytic cost at reference_len input frames
  int64_t reference_len = 0;

  // Errors unless indices are sorted, unique and in range, ungated structures
  // are fully kept, and the realized counts match the kept set exactly.
  void validate(const model::Model& base) const;
};

CompactionPlan make_plan(const model::Model& m, const KeepMask& keep, int64_t reference_len);

// The architecture induced by the plan's kept counts.
model::Arch plan_arch(const model::Arch& base, const CompactionPlan& plan);

// The per-bank keep mask encoded by the plan's kept indices.
KeepMask plan_mask(const model::Model& base, const CompactionPlan& plan);

// New gate-free model with every dropped channel/head/neuron sliced out of
// the weights; validates the plan first.
model::Model compact(const model::Model& m, const CompactionPlan& plan);

// Exact 0/1 gate vectors for forwarding the gated reference.
std::vector<Tensor> binary_gate_tensors(const fabric::GateFabric& fab, const KeepMask& keep);

struct EquivalenceReport {
  int64_t inputs = 0;
  double max_abs_diff = 0.0;
  bool pass = false;
};

// Compares embeddings of the gated model under the binary assignment against
// the compacted model on seeded random inputs at the reference length.
EquivalenceReport verify_equivalence(const model::Model& gated, const KeepMask& keep,
                                     const model::Model& compacted, int64_t n_inputs,
                                     uint64_t seed);

std::string plan_to_text(const CompactionPlan& p);
CompactionPlan plan_from_text(const std::string& text);

// Finalized-model persistence in the standard snapshot format.
ckpt::Checkpoint compacted_checkpoint(const model::Model& m, const std::string& config_text,
                                      int64_t step, int64_t epoch);

// Rebuilds a model from any snapshot; gated when gate banks are present.
model::Model restore_model(const ckpt::Checkpoint& c);

}  // namespace hp::compact
