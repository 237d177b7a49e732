#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "model.hpp"

// Single-file binary snapshot of a run: config text, architecture, parameter
// and gate values, controller multipliers, optimizer moments, and the step
// counters. Layout is explicit little-endian (documented in docs/FORMATS.md);
// everything else about the run (datasets, schedules, gate draws) is a pure
// function of the config and these counters, so a loaded snapshot continues
// training bit-identically.

namespace hp::ckpt {

inline constexpr uint32_t kVersion = 1;

struct TensorBlob {
  std::string name;
  std::vector<double> data;
};

struct OptSlotState {
  std::vector<double> m, v;
};

struct OptGroupState {
  std::vector<OptSlotState> slots;
};

struct Checkpoint {
  bool compacted = false;      // finalized dense model: no gates, no optimizer
  int64_t step = 0;            // global steps completed
  int64_t epoch = 0;           // full epochs completed at save time
  std::string config_text;     // flat key=value render of the run config
  model::Arch arch;
  std::vector<TensorBlob> params;      // model.params() order
  std::vector<TensorBlob> log_alphas;  // fabric bank order, empty when compacted
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  int64_t opt_steps = 0;
  std::vector<OptGroupState> opt_groups;  // trainer group order, empty when compacted
};

std::vector<uint8_t> serialize(const Checkpoint& c);
Checkpoint deserialize(const std::vector<uint8_t>& bytes);

void save(const std::string& path, const Checkpoint& c);
Checkpoint load(const std::string& path);

}  // namespace hp::ckpt
