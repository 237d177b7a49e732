#include "model.hpp"

#include <cmath>

#include "rng.hpp"

namespace hp::model {

namespace O = hp::ops;

void Arch::validate() const {
  HP_CHECK(feat_dim > 0 && d_model > 0 && d_head > 0 && pooling_heads > 0 && embedding_dim > 0,
           "architecture extents must be positive");
  HP_CHECK(!conv.empty(), "at least one conv layer required");
  for (const ConvSpec& c : conv)  // zero channels: a fully compacted-away layer (geometry only)
    HP_CHECK(c.channels >= 0 && c.kernel > 0 && c.stride > 0, "invalid conv spec");
  HP_CHECK(conv.back().channels == d_model,
           "last conv layer must emit d_model channels, got " << conv.back().channels << " vs "
                                                              << d_model);
  HP_CHECK(!blocks.empty(), "at least one transformer block required");
  for (const BlockArch& b : blocks) {
    HP_CHECK(b.heads >= 0 && b.ffn >= 0, "negative block sizes");
    HP_CHECK(b.heads * d_head <= 4 * d_model, "implausible head count");
  }
  HP_CHECK(d_model % pooling_heads == 0,
           "d_model " << d_model << " not divisible by pooling heads " << pooling_heads);
  if (head == HeadKind::kAam) HP_CHECK(num_classes >= 2, "AAM head needs >= 2 classes");
  HP_CHECK(max_frames > 0, "max_frames must be positive");
  frames_after_conv(max_frames);  // throws if the front-end eats the whole signal
}

int64_t Arch::frames_after_conv(int64_t t) const {
  for (const ConvSpec& c : conv) {
    HP_CHECK(t >= c.kernel, "input of " << t << " frames too short for kernel " << c.kernel);
    t = (t - c.kernel) / c.stride + 1;
  }
  return t;
}

Arch small_arch(int64_t feat_dim, HeadKind head, int64_t num_classes, int64_t max_frames) {
  Arch a;
  a.feat_dim = feat_dim;
  a.conv = {{32, 3, 2}, {64, 3, 2}};
  a.blocks.assign(4, BlockArch{4, 256});
  a.d_model = 64;
  a.d_head = 16;
  a.pooling_heads = 4;
  a.embedding_dim = 32;
  a.head = head;
  a.num_classes = num_classes;
  a.max_frames = max_frames;
  a.validate();
  return a;
}

Arch large_arch(int64_t feat_dim, HeadKind head, int64_t num_classes, int64_t max_frames) {
  Arch a;
  a.feat_dim = feat_dim;
  a.conv = {{32, 3, 2}, {96, 3, 2}};
  a.blocks.assign(8, BlockArch{6, 384});
  a.d_model = 96;
  a.d_head = 16;
  a.pooling_heads = 4;
  a.embedding_dim = 32;
  a.head = head;
  a.num_classes = num_classes;
  a.max_frames = max_frames;
  a.validate();
  return a;
}

Model::Model(Arch arch, uint64_t seed, bool gated) : arch_(std::move(arch)) {
  arch_.validate();
  build_params(seed);
  conv_bank_.assign(arch_.conv.size(), -1);
  head_bank_.assign(arch_.blocks.size(), -1);
  ffn_bank_.assign(arch_.blocks.size(), -1);
  if (gated) build_fabric();
}

Tensor Model::add_param(const std::string& name, Shape shape, double gaussian_scale, uint64_t seed,
                        double constant) {
  Tensor t = Tensor::empty(shape, arch_.dtype, true);
  int64_t n = t.numel();
  if (gaussian_scale > 0.0) {
    for (int64_t i = 0; i < n; ++i)
      t.set_value_at(i, gaussian_scale * rng::gaussian(seed, rng::kParamInit,
                                                       static_cast<uint64_t>(param_seq_),
                                                       static_cast<uint64_t>(i)));
  } else {
    for (int64_t i = 0; i < n; ++i) t.set_value_at(i, constant);
  }
  ++param_seq_;
  index_[name] = params_.size();
  params_.push_back({name, t});
  return t;
}

void Model::build_params(uint64_t seed) {
  const int64_t D = arch_.d_model, dh = arch_.d_head, P = arch_.pooling_heads,
                E = arch_.embedding_dim;
  int64_t in_ch = arch_.feat_dim;
  for (size_t i = 0; i < arch_.conv.size(); ++i) {
    const ConvSpec& c = arch_.conv[i];
    std::string p = "conv" + std::to_string(i);
    if (c.channels > 0) {
      if (in_ch > 0)  // an emptied predecessor leaves this layer bias-only
        add_param(p + ".w", {c.channels, in_ch, c.kernel},
                  1.0 / std::sqrt(static_cast<double>(in_ch * c.kernel)), seed);
      add_param(p + ".b", {c.channels}, 0.0, seed);
    }
    in_ch = c.channels;
  }
  add_param("pos", {arch_.pos_len(), D}, 0.02, seed);
  for (size_t i = 0; i < arch_.blocks.size(); ++i) {
    const BlockArch& b = arch_.blocks[i];
    std::string p = "block" + std::to_string(i);
    // layer norms are part of the unremovable backbone: they survive even when
    // the sublayer they fed collapses to a residual bias-add
    add_param(p + ".ln1.g", {D}, 0.0, seed, 1.0);
    add_param(p + ".ln1.b", {D}, 0.0, seed);
    if (b.heads > 0) {
      const int64_t hd = b.heads * dh;
      const double ws = 1.0 / std::sqrt(static_cast<double>(D));
      add_param(p + ".attn.wq", {D, hd}, ws, seed);
      add_param(p + ".attn.bq", {hd}, 0.0, seed);
      add_param(p + ".attn.wk", {D, hd}, ws, seed);
      add_param(p + ".attn.bk", {hd}, 0.0, seed);
      add_param(p + ".attn.wv", {D, hd}, ws, seed);
      add_param(p + ".attn.bv", {hd}, 0.0, seed);
      add_param(p + ".attn.wo", {hd, D}, 1.0 / std::sqrt(static_cast<double>(hd)), seed);
    }
    add_param(p + ".attn.bo", {D}, 0.0, seed);
    add_param(p + ".ln2.g", {D}, 0.0, seed, 1.0);
    add_param(p + ".ln2.b", {D}, 0.0, seed);
    if (b.ffn > 0) {
      add_param(p + ".ffn.w1", {D, b.ffn}, 1.0 / std::sqrt(static_cast<double>(D)), seed);
      add_param(p + ".ffn.b1", {b.ffn}, 0.0, seed);
      add_param(p + ".ffn.w2", {b.ffn, D}, 1.0 / std::sqrt(static_cast<double>(b.ffn)), seed);
    }
    add_param(p + ".ffn.b2", {D}, 0.0, seed);
  }
  const int64_t L = static_cast<int64_t>(arch_.blocks.size());
  add_param("pool.wk", {L}, 0.0, seed);
  add_param("pool.wv", {L}, 0.0, seed);
  add_param("pool.q", {P, D}, 1.0 / std::sqrt(static_cast<double>(D)), seed);
  add_param("pool.w", {D, E}, 1.0 / std::sqrt(static_cast<double>(D)), seed);
  add_param("pool.b", {E}, 0.0, seed);
  if (arch_.head == HeadKind::kAam) {
    add_param("head.w", {arch_.num_classes, E}, 1.0, seed);
  } else {
    add_param("head.w", {E}, 1.0 / std::sqrt(static_cast<double>(E)), seed);
    add_param("head.b", {1}, 0.0, seed);
  }
}

void Model::build_fabric() {
  const int64_t D = arch_.d_model, dh = arch_.d_head;
  const int n_conv = static_cast<int>(arch_.conv.size());
  std::vector<fabric::GateBank> banks;
  std::vector<fabric::SharedBlock> shared;
  auto gated_conv = [&](int i) { return n_conv >= 2 && i < n_conv - 1; };

  for (int i = 0; i < n_conv; ++i) {
    if (!gated_conv(i)) continue;
    const ConvSpec& c = arch_.conv[static_cast<size_t>(i)];
    int64_t in_ch = i == 0 ? arch_.feat_dim : arch_.conv[static_cast<size_t>(i - 1)].channels;
    // producing filter: its weights unless the previous layer's gates share them, plus the bias
    int64_t owned = (i > 0 && gated_conv(i - 1) ? 0 : in_ch * c.kernel) + 1;
    const ConvSpec& next = arch_.conv[static_cast<size_t>(i + 1)];
    if (gated_conv(i + 1)) {
      // consuming weights split across (this channel, next channel) pairs
      shared.push_back({static_cast<int>(banks.size()), static_cast<int>(banks.size()) + 1,
                        next.kernel});
    } else {
      owned += next.channels * next.kernel;
    }
    conv_bank_[static_cast<size_t>(i)] = static_cast<int>(banks.size());
    banks.push_back({"conv" + std::to_string(i), fabric::Kind::ConvChannel, i, owned,
                     Tensor::full({c.channels}, 2.5, arch_.dtype, true)});
  }
  for (size_t i = 0; i < arch_.blocks.size(); ++i) {
    const BlockArch& b = arch_.blocks[i];
    if (b.heads > 0) {
      int64_t owned = 3 * (D * dh + dh) + dh * D;  // Q/K/V slices + output-projection rows
      head_bank_[i] = static_cast<int>(banks.size());
      banks.push_back({"block" + std::to_string(i) + ".heads", fabric::Kind::MhsaHead,
                       static_cast<int>(i), owned, Tensor::full({b.heads}, 2.5, arch_.dtype, true)});
    }
    if (b.ffn > 0) {
      int64_t owned = (D + 1) + D;  // input row with bias + output column
      ffn_bank_[i] = static_cast<int>(banks.size());
      banks.push_back({"block" + std::to_string(i) + ".ffn", fabric::Kind::FfnNeuron,
                       static_cast<int>(i), owned, Tensor::full({b.ffn}, 2.5, arch_.dtype, true)});
    }
  }

  // Independent fixed-bucket count: everything no gate can remove.
  int64_t fixed = 0;
  for (const NamedParam& p : params_) {
    const std::string& n = p.name;
    bool is_fixed = false;
    if (n == "pos" || n.rfind("pool.", 0) == 0 || n.rfind("head.", 0) == 0 ||
        n.find(".ln1.") != std::string::npos || n.find(".ln2.") != std::string::npos ||
        (n.size() >= 8 && n.substr(n.size() - 8) == ".attn.bo") ||
        (n.size() >= 7 && n.substr(n.size() - 7) == ".ffn.b2")) {
      is_fixed = true;
    } else if (n.rfind("conv", 0) == 0) {
      int layer = std::stoi(n.substr(4, n.find('.') - 4));
      bool weight = n.substr(n.find('.')) == ".w";
      if (gated_conv(layer)) {
        is_fixed = false;  // producing filter owned/shared by this layer's gates
      } else if (weight) {
        is_fixed = !(layer > 0 && gated_conv(layer - 1));  // else owned by the producer bank
      } else {
        is_fixed = true;  // ungated layer's bias
      }
    }
    if (is_fixed) fixed += p.t.numel();
  }

  fabric_ = std::make_unique<fabric::GateFabric>(std::move(banks), std::move(shared), fixed,
                                                 count_params());
}

fabric::GateFabric& Model::fabric() {
  HP_CHECK(fabric_ != nullptr, "model has no gate fabric");
  return *fabric_;
}

const fabric::GateFabric& Model::fabric() const {
  HP_CHECK(fabric_ != nullptr, "model has no gate fabric");
  return *fabric_;
}

Tensor Model::param(const std::string& name) const {
  auto it = index_.find(name);
  HP_CHECK(it != index_.end(), "unknown parameter " << name);
  return params_[it->second].t;
}

bool Model::has_param(const std::string& name) const { return index_.count(name) > 0; }

namespace {

void check_block_finite(const Tensor& t, size_t block) {
  bool ok = true;
  dispatch_dtype(t.dtype(), [&](auto tag) {
    using S = decltype(tag);
    const S* p = t.impl()->template data_as<S>();
    for (int64_t i = 0; i < t.numel(); ++i)
      if (!std::isfinite(static_cast<double>(p[i]))) {
        ok = false;
        return;
      }
  });
  HP_CHECK(ok, "transformer block " << block << " produced non-finite values");
}

}  // namespace

Model::Output Model::forward_given_gates(const Tensor& x, const std::vector<Tensor>& gate_values) const {
  HP_CHECK(x.defined() && x.ndim() == 3 && x.dim(2) == arch_.feat_dim,
           "model input must be [batch, frames, " << arch_.feat_dim << "], got "
                                                  << (x.defined() ? shape_str(x.shape()) : "<empty>"));
  size_t want = fabric_ ? fabric_->banks().size() : 0;
  HP_CHECK(gate_values.size() == want,
           "expected " << want << " gate banks, got " << gate_values.size());
  const int64_t B = x.dim(0), D = arch_.d_model, dh = arch_.d_head;

  Tensor h = O::permute(x, {0, 2, 1});  // [B, feat, T]
  int64_t t_len = x.dim(1);
  bool h_zero = false;  // an emptied conv layer leaves a channel-less all-zero signal
  for (size_t i = 0; i < arch_.conv.size(); ++i) {
    const ConvSpec& c = arch_.conv[i];
    std::string p = "conv" + std::to_string(i);
    if (c.channels == 0) {  // compacted away: time geometry still applies
      HP_CHECK(t_len >= c.kernel,
               "input of " << t_len << " frames too short for kernel " << c.kernel);
      t_len = (t_len - c.kernel) / c.stride + 1;
      h_zero = true;
      continue;
    }
    if (h_zero) {  // all inputs identically zero: the layer reduces to its bias response
      HP_CHECK(t_len >= c.kernel,
               "input of " << t_len << " frames too short for kernel " << c.kernel);
      t_len = (t_len - c.kernel) / c.stride + 1;
      h = O::add(Tensor::full({B, c.channels, t_len}, 0.0, arch_.dtype, false),
                 O::reshape(param(p + ".b"), {c.channels, 1}));
      h_zero = false;
    } else {
      h = O::conv1d(h, param(p + ".w"), static_cast<int>(c.stride));
      h = O::add(h, O::reshape(param(p + ".b"), {c.channels, 1}));
      t_len = h.dim(2);
    }
    h = O::gelu(h);
    int bank = conv_bank_[i];
    if (bank >= 0) {
      const Tensor& g = gate_values[static_cast<size_t>(bank)];
      HP_CHECK(g.numel() == c.channels, "conv gate bank size mismatch at layer " << i);
      h = O::mul(h, O::reshape(g, {c.channels, 1}));
    }
  }
  HP_CHECK(!h_zero, "conv front-end cannot end on an emptied layer");
  const int64_t T = h.dim(2);
  h = O::permute(h, {0, 2, 1});  // [B, T, D]
  h = O::add(h, O::slice(param("pos"), 0, 0, T));

  Output out;
  for (size_t i = 0; i < arch_.blocks.size(); ++i) {
    const BlockArch& b = arch_.blocks[i];
    std::string p = "block" + std::to_string(i);
    if (b.heads > 0) {
      const int64_t H = b.heads, hd = H * dh;
      Tensor n1 = O::layer_norm_last(h, param(p + ".ln1.g"), param(p + ".ln1.b"));
      Tensor flat = O::reshape(n1, {B * T, D});
      auto split_heads = [&](const Tensor& proj) {
        return O::reshape(O::permute(O::reshape(proj, {B, T, H, dh}), {0, 2, 1, 3}), {B * H, T, dh});
      };
      Tensor q = split_heads(O::add(O::matmul(flat, param(p + ".attn.wq")), param(p + ".attn.bq")));
      Tensor k = split_heads(O::add(O::matmul(flat, param(p + ".attn.wk")), param(p + ".attn.bk")));
      Tensor v = split_heads(O::add(O::matmul(flat, param(p + ".attn.wv")), param(p + ".attn.bv")));
      Tensor attn = O::softmax_last(O::mul_scalar(O::bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh))));
      Tensor ctx = O::reshape(O::bmm(attn, v), {B, H, T, dh});
      int bank = head_bank_[i];
      if (bank >= 0) {
        const Tensor& g = gate_values[static_cast<size_t>(bank)];
        HP_CHECK(g.numel() == H, "head gate bank size mismatch at block " << i);
        ctx = O::mul(ctx, O::reshape(g, {H, 1, 1}));
      }
      Tensor merged = O::reshape(O::permute(ctx, {0, 2, 1, 3}), {B * T, hd});
      Tensor proj = O::add(O::matmul(merged, param(p + ".attn.wo")), param(p + ".attn.bo"));
      h = O::add(h, O::reshape(proj, {B, T, D}));
    } else {
      h = O::add(h, param(p + ".attn.bo"));
    }
    if (b.ffn > 0) {
      Tensor n2 = O::layer_norm_last(h, param(p + ".ln2.g"), param(p + ".ln2.b"));
      Tensor a = O::gelu(O::add(O::matmul(O::reshape(n2, {B * T, D}), param(p + ".ffn.w1")),
                                param(p + ".ffn.b1")));
      int bank = ffn_bank_[i];
      if (bank >= 0) {
        const Tensor& g = gate_values[static_cast<size_t>(bank)];
        HP_CHECK(g.numel() == b.ffn, "ffn gate bank size mismatch at block " << i);
        a = O::mul(a, g);
      }
      Tensor o2 = O::add(O::matmul(a, param(p + ".ffn.w2")), param(p + ".ffn.b2"));
      h = O::add(h, O::reshape(o2, {B, T, D}));
    } else {
      h = O::add(h, param(p + ".ffn.b2"));
    }
    check_block_finite(h, i);
    out.block_outputs.push_back(h);
  }

  const int64_t L = static_cast<int64_t>(arch_.blocks.size()), P = arch_.pooling_heads,
                dhp = D / P;
  Tensor wk = O::softmax_last(param("pool.wk"));
  Tensor wv = O::softmax_last(param("pool.wv"));
  Tensor key, val;
  for (int64_t l = 0; l < L; ++l) {
    Tensor kl = O::mul(out.block_outputs[static_cast<size_t>(l)], O::slice(wk, 0, l, 1));
    Tensor vl = O::mul(out.block_outputs[static_cast<size_t>(l)], O::slice(wv, 0, l, 1));
    key = l == 0 ? kl : O::add(key, kl);
    val = l == 0 ? vl : O::add(val, vl);
  }
  Tensor logits = O::reshape(O::matmul(O::reshape(key, {B * T, D}), O::permute(param("pool.q"), {1, 0})),
                             {B, T, P});
  Tensor alpha = O::softmax_last(O::permute(logits, {0, 2, 1}));  // [B, P, T]
  Tensor vr = O::reshape(O::permute(O::reshape(val, {B, T, P, dhp}), {0, 2, 1, 3}), {B * P, T, dhp});
  Tensor pooled = O::reshape(O::bmm(O::reshape(alpha, {B * P, 1, T}), vr), {B, D});
  out.embedding = O::add(O::matmul(pooled, param("pool.w")), param("pool.b"));
  return out;
}

std::vector<Tensor> Model::sampled_gate_values(uint64_t seed, int64_t step) const {
  HP_CHECK(fabric_ != nullptr, "sampling gates on an ungated model");
  std::vector<Tensor> out;
  const auto& banks = fabric_->banks();
  for (size_t bi = 0; bi < banks.size(); ++bi) {
    std::vector<double> u(static_cast<size_t>(banks[bi].gates()));
    for (size_t j = 0; j < u.size(); ++j)
      u[j] = rng::uniform_open(seed, rng::kGateSample, static_cast<uint64_t>(step), bi, j);
    out.push_back(hc::sample_gates(banks[bi].log_alpha, u, fabric_->gate_params()));
  }
  return out;
}

std::vector<Tensor> Model::deterministic_gate_values() const {
  HP_CHECK(fabric_ != nullptr, "evaluating gates on an ungated model");
  std::vector<Tensor> out;
  for (const auto& b : fabric_->banks())
    out.push_back(hc::deterministic_gates(b.log_alpha, fabric_->gate_params()));
  return out;
}

Model::Output Model::forward_train(const Tensor& x, uint64_t seed, int64_t step) const {
  return forward_given_gates(x, sampled_gate_values(seed, step));
}

Model::Output Model::forward_eval(const Tensor& x) const {
  return forward_given_gates(x, fabric_ ? deterministic_gate_values() : std::vector<Tensor>{});
}

int64_t Model::count_params() const {
  int64_t n = 0;
  for (const NamedParam& p : params_) n += p.t.numel();
  return n;
}

// Analytic cost model, conventions: matmul/conv cost 2 FLOPs per multiply-
// accumulate; bias/residual adds and gate-free elementwise multiplies cost 1;
// per-element budgets gelu=8, softmax=4 (per entry), layer norm=8. Counted
// through the embedding (task head excluded); gate multiplies excluded (they
// are training scaffolding, not architecture).
int64_t arch_flops(const Arch& arch, int64_t input_len) {
  const int64_t D = arch.d_model, dh = arch.d_head, P = arch.pooling_heads,
                E = arch.embedding_dim;
  int64_t f = 0;
  int64_t t = input_len;
  int64_t in_ch = arch.feat_dim;
  for (const ConvSpec& c : arch.conv) {
    HP_CHECK(t >= c.kernel, "input too short for conv front-end");
    int64_t to = (t - c.kernel) / c.stride + 1;
    f += 2 * c.channels * to * in_ch * c.kernel;  // conv MACs
    f += c.channels * to;                         // bias
    f += 8 * c.channels * to;                     // gelu
    in_ch = c.channels;
    t = to;
  }
  f += t * D;  // positional add
  const int64_t L = static_cast<int64_t>(arch.blocks.size());
  for (const BlockArch& b : arch.blocks) {
    if (b.heads > 0) {
      const int64_t hd = b.heads * dh;
      f += 8 * t * D;                      // layer norm
      f += 3 * (2 * t * D * hd + t * hd);  // q/k/v projections
      f += 2 * b.heads * t * t * dh;       // attention scores
      f += b.heads * t * t;                // score scaling
      f += 4 * b.heads * t * t;            // softmax
      f += 2 * b.heads * t * t * dh;       // context aggregation
      f += 2 * t * hd * D + t * D;         // output projection
      f += t * D;                          // residual
    } else {
      f += t * D;  // bias-add residual
    }
    if (b.ffn > 0) {
      f += 8 * t * D;
      f += 2 * t * D * b.ffn + t * b.ffn;  // first linear
      f += 8 * t * b.ffn;                  // gelu
      f += 2 * t * b.ffn * D + t * D;      // second linear
      f += t * D;                          // residual
    } else {
      f += t * D;
    }
  }
  f += 2 * 4 * L;              // layer-weight softmaxes
  f += 2 * (2 * L - 1) * t * D;  // key/value layer combinations
  f += 2 * t * D * P;          // pooling attention logits
  f += 4 * P * t;              // pooling softmax
  f += 2 * t * D;              // attentive averages
  f += 2 * D * E + E;          // embedding projection
  return f;
}

int64_t Model::count_flops(int64_t input_len) const { return arch_flops(arch_, input_len); }

}  // namespace hp::model
