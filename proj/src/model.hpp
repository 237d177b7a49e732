#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gate_fabric.hpp"
#include "tensor.hpp"

// Conv front-end -> pre-norm transformer stack -> multi-head attentive pooling
// over layer-weighted block outputs -> embedding, plus a task head. Structural
// gates (conv channels, attention heads, FFN neurons) multiply activations so
// a zero gate is exactly equivalent to removing the structure.

namespace hp::model {

struct ConvSpec {
  int64_t channels;
  int64_t kernel;
  int64_t stride;
};

enum class HeadKind : uint8_t { kAam = 0, kBinary = 1 };

// Per-block structural sizes; zero means the sublayer collapsed to a residual
// bias-add (compacted-away attention or FFN).
struct BlockArch {
  int64_t heads;
  int64_t ffn;
};

struct Arch {
  int64_t feat_dim = 24;
  std::vector<ConvSpec> conv;  // last layer's channels must equal d_model
  std::vector<BlockArch> blocks;
  int64_t d_model = 64;
  int64_t d_head = 16;
  int64_t pooling_heads = 4;
  int64_t embedding_dim = 32;
  HeadKind head = HeadKind::kAam;
  int64_t num_classes = 64;   // AAM head only
  int64_t max_frames = 50;    // raw input length bound; sizes the positional table
  Dtype dtype = Dtype::F64;

  void validate() const;
  int64_t frames_after_conv(int64_t t) const;  // errors if t too short
  int64_t pos_len() const { return frames_after_conv(max_frames); }
};

// Uniform-size presets (the trainable starting points).
Arch small_arch(int64_t feat_dim, HeadKind head, int64_t num_classes, int64_t max_frames);
Arch large_arch(int64_t feat_dim, HeadKind head, int64_t num_classes, int64_t max_frames);

// Analytic forward cost of an architecture (see the definition for the
// counting conventions); does not need constructed weights.
int64_t arch_flops(const Arch& arch, int64_t input_len);

struct NamedParam {
  std::string name;
  Tensor t;
};

class Model {
 public:
  // gated=true attaches a gate fabric (training form); gated=false builds the
  // same architecture with no gates (baselines and compacted models).
  Model(Arch arch, uint64_t seed, bool gated);

  const Arch& arch() const { return arch_; }
  bool gated() const { return fabric_ != nullptr; }
  fabric::GateFabric& fabric();
  const fabric::GateFabric& fabric() const;

  std::vector<NamedParam>& params() { return params_; }
  const std::vector<NamedParam>& params() const { return params_; }
  Tensor param(const std::string& name) const;  // errors on unknown name
  bool has_param(const std::string& name) const;

  struct Output {
    std::vector<Tensor> block_outputs;  // one [B,T',D] per transformer block
    Tensor embedding;                   // [B, embedding_dim]
  };

  // gate_values: one tensor per fabric bank, in bank order; must be empty for
  // ungated models. x is [B, T, feat].
  Output forward_given_gates(const Tensor& x, const std::vector<Tensor>& gate_values) const;

  std::vector<Tensor> sampled_gate_values(uint64_t seed, int64_t step) const;  // train draws
  std::vector<Tensor> deterministic_gate_values() const;                       // eval gates

  Output forward_train(const Tensor& x, uint64_t seed, int64_t step) const;
  Output forward_eval(const Tensor& x) const;

  int64_t count_params() const;               // every model parameter (gates excluded)
  int64_t count_flops(int64_t input_len) const;  // analytic, through the embedding

  // Fabric bank index for a structure, -1 when that structure is ungated.
  int conv_bank(int layer) const { return conv_bank_[static_cast<size_t>(layer)]; }
  int head_bank(int block) const { return head_bank_[static_cast<size_t>(block)]; }
  int ffn_bank(int block) const { return ffn_bank_[static_cast<size_t>(block)]; }

 private:
  Tensor add_param(const std::string& name, Shape shape, double gaussian_scale, uint64_t seed,
                   double constant = 0.0);  // gaussian_scale 0 -> constant fill
  void build_params(uint64_t seed);
  void build_fabric();

  Arch arch_;
  std::vector<NamedParam> params_;
  std::map<std::string, size_t> index_;
  std::unique_ptr<fabric::GateFabric> fabric_;
  std::vector<int> conv_bank_, head_bank_, ffn_bank_;
  int64_t param_seq_ = 0;  // per-tensor init stream tag
};

}  // namespace hp::model
