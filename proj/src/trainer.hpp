#pragma once

#include <optional>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "kvconfig.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "optimizer.hpp"
#include "sparsity_controller.hpp"
#include "synth_tasks.hpp"

// The joint loop: every batch takes one descent step on weights and gate
// logits against task loss + sparsity penalty, then one ascent step on the
// penalty multipliers at the violation measured before the descent. Batching,
// gate draws, and schedules are pure functions of (config, step), so runs are
// bit-reproducible and checkpoints resume exactly.

namespace hp::train {

struct TrainConfig {
  std::string task = "toy_sv";     // toy_sv | toy_spoof
  std::string preset = "sv_full";  // sv_full | sv_small_data | spoof_default
  double target_sparsity = 0.5;    // in [0,1); 0 trains without pruning pressure
  int64_t epochs = 10;
  int64_t batch_size = 32;
  double lr_weights = 1e-3;
  double lr_gates = 1e-2;
  double lr_multipliers = 2e-2;
  double weight_decay = 0.01;  // weights group only
  double clip_norm = 5.0;      // global gradient norm bound
  double warmup_epochs = 5.0;  // target ramp length
  uint64_t seed = 1;
  int64_t eval_every = 0;        // steps between held-out evals; 0 = each epoch end
  int64_t checkpoint_every = 0;  // steps between snapshots; 0 = each epoch end
  std::string out_dir;           // empty = keep everything in memory

  void validate() const;
};

// Key names are exactly the field names; unknown keys are rejected by name.
void apply_kv(TrainConfig& c, const std::string& key, const std::string& value);
TrainConfig config_from_kv(const kv::Items& items, TrainConfig base = {});
kv::Items config_to_kv(const TrainConfig& c);

struct StepRecord {
  int64_t step = 0;    // 0-based global index of the completed step
  double epoch = 0;    // fractional progress at which the step was taken
  double task_loss = 0, reg_loss = 0, s_hat = 0, t_now = 0;
  double lambda1 = 0, lambda2 = 0, lr = 0;
  std::optional<double> eer, min_dcf, accuracy;  // present on eval steps

  std::string to_json() const;  // single line, fixed key order
};

struct EvalResult {
  std::optional<double> eer, min_dcf;  // identity task
  std::optional<double> accuracy;      // artifact task
};

struct FitResult {
  std::vector<StepRecord> records;
  EvalResult final_eval;
  double final_expected_sparsity = 0;
  std::string final_checkpoint;  // empty when out_dir is empty
};

class Session {
 public:
  explicit Session(TrainConfig cfg);
  explicit Session(const ckpt::Checkpoint& snapshot);

  const TrainConfig& config() const { return cfg_; }
  model::Model& net() { return *model_; }
  const model::Model& net() const { return *model_; }
  ctrl::ControllerState& controller() { return ctrl_; }
  optim::AdamW& optimizer() { return opt_; }

  int64_t step() const { return step_; }
  int64_t steps_per_epoch() const { return steps_per_epoch_; }
  int64_t total_steps() const { return steps_per_epoch_ * cfg_.epochs; }
  double epoch_progress() const { return double(step_) / double(steps_per_epoch_); }

  // One descend-then-ascend update on the scheduled batch for global step
  // `step()`; advances the counter and returns the step's metrics.
  StepRecord train_step();

  // Held-out metrics with deterministic gates (identity task: cosine trials
  // -> EER/minDCF; artifact task: thresholded logits -> accuracy).
  EvalResult evaluate() const;

  ckpt::Checkpoint snapshot() const;

  // Runs from the current step to total_steps(); writes metrics.log, config,
  // and checkpoints under out_dir when set.
  FitResult fit();

  // Scheduled batch for a global step: deterministic per-epoch shuffle,
  // trailing remainder dropped. Exposed for tests.
  void batch_for_step(int64_t step, Tensor& x, std::vector<int64_t>& labels) const;

 private:
  void build_data();
  void attach_optimizer();
  StepRecord step_on(const Tensor& x, const std::vector<int64_t>& labels);
  Tensor task_loss(const model::Model::Output& out, const std::vector<int64_t>& labels) const;
  [[noreturn]] void abort_non_finite(const char* what, double value, const Tensor& x,
                                     const std::vector<int64_t>& labels) const;

  TrainConfig cfg_;
  std::unique_ptr<model::Model> model_;
  ctrl::ControllerState ctrl_;
  optim::AdamW opt_;
  int group_weights_ = -1, group_gates_ = -1;
  int64_t step_ = 0;
  int64_t steps_per_epoch_ = 0;

  task::SvData sv_;        // task == toy_sv
  task::SpoofData spoof_;  // task == toy_spoof
  bool is_sv_ = true;
};

// Rebuilds the task named by `cfg` and computes held-out metrics for any
// model with a matching input shape: gated models run deterministic gates,
// compacted models run as-is. Matches Session::evaluate() bit for bit.
EvalResult evaluate_model(const model::Model& m, const TrainConfig& cfg);

}  // namespace hp::train
