#pragma once

#include <string>
#include <vector>

#include "tensor.hpp"

// Deterministic synthetic stand-ins for the two tasks: a multiclass identity
// task evaluated open-set over cosine trials, and a binary artifact-detection
// task. Every sample is a pure function of (seed, index), so generation is
// random-access and bit-reproducible.

namespace hp::task {

struct Utterance {
  int64_t label;  // class id (identity task) or 0/1 (spoof task)
  Tensor x;       // [frames, feat_dim], F64, no grad
};

struct Trial {
  int32_t a;    // indices into the eval set
  int32_t b;
  bool target;  // same class
};

struct SvTaskSpec {
  int64_t num_classes = 64;      // training identities
  int64_t eval_classes = 16;     // held-out identities, ids start at num_classes
  int64_t frames = 50;
  int64_t feat_dim = 24;
  int64_t train_per_class = 32;
  int64_t eval_per_class = 10;
  double prototype_scale = 1.0;
  double noise_scale = 0.5;
  int64_t mixing_depth = 2;      // fixed random tanh layers shared by all samples
  uint64_t seed = 1;

  void validate() const;
};

struct SpoofTaskSpec {
  int64_t frames = 50;
  int64_t feat_dim = 24;
  int64_t train_n = 2048;
  int64_t eval_n = 512;
  double amplitude = 0.05;       // artifact strength
  int64_t artifact_period = 1;   // frames between sign flips
  double spoof_fraction = 0.5;
  int64_t smooth_window = 5;     // moving-average low-pass width
  uint64_t seed = 1;

  void validate() const;
};

struct SvData {
  SvTaskSpec spec;
  std::vector<Utterance> train;
  std::vector<Utterance> eval;
  std::vector<Trial> trials;
};

struct SpoofData {
  SpoofTaskSpec spec;
  std::vector<Utterance> train;
  std::vector<Utterance> eval;
};

// Identity task: class prototype + per-frame noise pushed through fixed
// random tanh mixing layers. Eval identities are disjoint from training ones;
// trials pair eval utterances, target/nontarget balanced 1:1.
SvData gen_sv(const SvTaskSpec& spec);

// Artifact task: moving-average-smoothed Gaussian sequences; spoofed samples
// add an alternating-sign component over a random contiguous half of the
// frames.
SpoofData gen_spoof(const SpoofTaskSpec& spec);

// Presets: the full-size training set and the low-resource variant.
SvTaskSpec sv_full(uint64_t seed);
SvTaskSpec sv_small_data(uint64_t seed);
SpoofTaskSpec spoof_default(uint64_t seed);

// Flat binary export (little-endian header + f32 samples), layout documented
// in docs/FORMATS.md.
void export_dataset(const std::string& path, const std::vector<Utterance>& utts);

}  // namespace hp::task
