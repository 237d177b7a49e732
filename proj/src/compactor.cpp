#include "compactor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>
#include <sstream>

#include "kvconfig.hpp"
#include "rng.hpp"

namespace hp::compact {

namespace {

void check_mask(const fabric::GateFabric& fab, const KeepMask& keep) {
  const auto& banks = fab.banks();
  HP_CHECK(keep.size() == banks.size(),
           "keep mask has " << keep.size() << " banks, fabric has " << banks.size());
  for (size_t bi = 0; bi < banks.size(); ++bi)
    HP_CHECK(keep[bi].size() == static_cast<size_t>(banks[bi].gates()),
             "keep mask for bank '" << banks[bi].name << "' has " << keep[bi].size()
                                    << " entries, bank has " << banks[bi].gates());
}

std::vector<int64_t> all_idx(int64_t n) {
  std::vector<int64_t> v(static_cast<size_t>(n));
  std::iota(v.begin(), v.end(), int64_t{0});
  return v;
}

// dst[c0, c1, ...] = src[idx[0][c0], idx[1][c1], ...]
void gather_param(Tensor dst, const Tensor& src, const std::vector<std::vector<int64_t>>& idx) {
  const int nd = static_cast<int>(idx.size());
  HP_CHECK(dst.ndim() == nd && src.ndim() == nd, "slice rank mismatch");
  for (int d = 0; d < nd; ++d)
    HP_CHECK(dst.dim(d) == static_cast<int64_t>(idx[static_cast<size_t>(d)].size()),
             "slice extent mismatch in dimension " << d);
  std::vector<int64_t> stride(static_cast<size_t>(nd), 1);
  for (int d = nd - 2; d >= 0; --d)
    stride[static_cast<size_t>(d)] = stride[static_cast<size_t>(d + 1)] * src.dim(d + 1);
  std::vector<int64_t> coord(static_cast<size_t>(nd), 0);
  for (int64_t flat = 0; flat < dst.numel(); ++flat) {
    int64_t sf = 0;
    for (int d = 0; d < nd; ++d) {
      const auto du = static_cast<size_t>(d);
      sf += idx[du][static_cast<size_t>(coord[du])] * stride[du];
    }
    dst.set_value_at(flat, src.value_at(sf));
    for (int d = nd - 1; d >= 0; --d) {
      if (++coord[static_cast<size_t>(d)] < dst.dim(d)) break;
      coord[static_cast<size_t>(d)] = 0;
    }
  }
}

}  // namespace

KeepMask binarize(const fabric::GateFabric& fab, double target) {
  HP_CHECK(target >= 0.0 && target < 1.0, "target sparsity must lie in [0, 1), got " << target);
  NoGradGuard ng;
  const auto& banks = fab.banks();
  std::vector<std::vector<double>> det(banks.size());
  KeepMask keep(banks.size());
  for (size_t bi = 0; bi < banks.size(); ++bi) {
    det[bi] = hc::deterministic_gates(banks[bi].log_alpha, fab.gate_params()).to_vector();
    keep[bi].resize(det[bi].size());
    for (size_t j = 0; j < det[bi].size(); ++j) keep[bi][j] = det[bi][j] > 0.0 ? 1 : 0;
  }
  if (std::fabs(fab.realized_sparsity(keep) - target) <= 0.01) return keep;

  // miss: rank all gates by deterministic value and move the cut to the
  // achievable sparsity nearest the target
  struct Ref {
    double z;
    size_t bank, idx;
  };
  std::vector<Ref> order;
  for (size_t bi = 0; bi < det.size(); ++bi)
    for (size_t j = 0; j < det[bi].size(); ++j) order.push_back({det[bi][j], bi, j});
  std::sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) {
    if (a.z != b.z) return a.z > b.z;
    if (a.bank != b.bank) return a.bank < b.bank;
    return a.idx < b.idx;
  });

  KeepMask cand(banks.size());
  for (size_t bi = 0; bi < banks.size(); ++bi) cand[bi].assign(det[bi].size(), 0);
  size_t best_k = 0;
  double best_err = std::fabs(fab.realized_sparsity(cand) - target);
  for (size_t k = 0; k < order.size(); ++k) {
    cand[order[k].bank][order[k].idx] = 1;
    const double err = std::fabs(fab.realized_sparsity(cand) - target);
    if (err <= best_err) {  // ties keep more gates
      best_err = err;
      best_k = k + 1;
    }
  }
  for (auto& bank : keep) std::fill(bank.begin(), bank.end(), uint8_t{0});
  for (size_t k = 0; k < best_k; ++k) keep[order[k].bank][order[k].idx] = 1;
  return keep;
}

KeepMask plan_mask(const model::Model& base, const CompactionPlan& plan) {
  HP_CHECK(base.gated(), "plan masks exist only for gated models");
  const model::Arch& a = base.arch();
  HP_CHECK(plan.conv_kept.size() == a.conv.size() && plan.head_kept.size() == a.blocks.size() &&
               plan.ffn_kept.size() == a.blocks.size(),
           "plan does not match the architecture");
  const auto& banks = base.fabric().banks();
  KeepMask keep(banks.size());
  for (size_t bi = 0; bi < banks.size(); ++bi)
    keep[bi].assign(static_cast<size_t>(banks[bi].gates()), 0);
  auto put = [&](int bank, const std::vector<int64_t>& kept) {
    if (bank < 0) return;  // ungated structure: nothing to mark
    auto& mask = keep[static_cast<size_t>(bank)];
    for (int64_t j : kept) {
      HP_CHECK(j >= 0 && j < static_cast<int64_t>(mask.size()),
               "plan kept index " << j << " out of range for its gate bank");
      mask[static_cast<size_t>(j)] = 1;
    }
  };
  for (size_t i = 0; i < a.conv.size(); ++i)
    put(base.conv_bank(static_cast<int>(i)), plan.conv_kept[i]);
  for (size_t i = 0; i < a.blocks.size(); ++i) {
    put(base.head_bank(static_cast<int>(i)), plan.head_kept[i]);
    put(base.ffn_bank(static_cast<int>(i)), plan.ffn_kept[i]);
  }
  return keep;
}

model::Arch plan_arch(const model::Arch& base, const CompactionPlan& plan) {
  HP_CHECK(plan.conv_kept.size() == base.conv.size() &&
               plan.head_kept.size() == base.blocks.size() &&
               plan.ffn_kept.size() == base.blocks.size(),
           "plan does not match the architecture");
  model::Arch a = base;
  for (size_t i = 0; i < a.conv.size(); ++i)
    a.conv[i].channels = static_cast<int64_t>(plan.conv_kept[i].size());
  for (size_t i = 0; i < a.blocks.size(); ++i)
    a.blocks[i] = {static_cast<int64_t>(plan.head_kept[i].size()),
                   static_cast<int64_t>(plan.ffn_kept[i].size())};
  return a;
}

void CompactionPlan::validate(const model::Model& base) const {
  HP_CHECK(base.gated(), "plan validation needs the gated source model");
  const model::Arch& a = base.arch();
  HP_CHECK(conv_kept.size() == a.conv.size(),
           "plan covers " << conv_kept.size() << " conv layers, model has " << a.conv.size());
  HP_CHECK(head_kept.size() == a.blocks.size() && ffn_kept.size() == a.blocks.size(),
           "plan covers " << head_kept.size() << "/" << ffn_kept.size() << " blocks, model has "
                          << a.blocks.size());
  HP_CHECK(reference_len > 0, "plan reference length must be positive");

  auto check_list = [](const std::vector<int64_t>& kept, int64_t total, const std::string& what) {
    int64_t prev = -1;
    for (int64_t j : kept) {
      HP_CHECK(j >= 0 && j < total,
               what << ": kept index " << j << " out of range [0, " << total << ")");
      HP_CHECK(j > prev, what << ": kept indices must be sorted and unique");
      prev = j;
    }
  };
  for (size_t i = 0; i < a.conv.size(); ++i) {
    const std::string what = "conv" + std::to_string(i);
    check_list(conv_kept[i], a.conv[i].channels, what);
    if (base.conv_bank(static_cast<int>(i)) < 0)
      HP_CHECK(static_cast<int64_t>(conv_kept[i].size()) == a.conv[i].channels,
               what << " is ungated and must keep every channel");
  }
  for (size_t i = 0; i < a.blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i);
    check_list(head_kept[i], a.blocks[i].heads, p + ".heads");
    check_list(ffn_kept[i], a.blocks[i].ffn, p + ".ffn");
    if (base.head_bank(static_cast<int>(i)) < 0)
      HP_CHECK(static_cast<int64_t>(head_kept[i].size()) == a.blocks[i].heads,
               p << ".heads is ungated and must keep every head");
    if (base.ffn_bank(static_cast<int>(i)) < 0)
      HP_CHECK(static_cast<int64_t>(ffn_kept[i].size()) == a.blocks[i].ffn,
               p << ".ffn is ungated and must keep every neuron");
  }

  const KeepMask keep = plan_mask(base, *this);
  const auto& fab = base.fabric();
  const int64_t rem = fab.remaining_params(keep);
  HP_CHECK(realized_params == rem, "plan claims " << realized_params
                                                  << " remaining parameters, the kept set yields "
                                                  << rem);
  HP_CHECK(realized_sparsity == fab.realized_sparsity(keep),
           "plan sparsity is inconsistent with its kept set");
  const int64_t fl = model::arch_flops(plan_arch(a, *this), reference_len);
  HP_CHECK(realized_flops == fl,
           "plan cost is " << realized_flops << ", the kept counts yield " << fl);
}

CompactionPlan make_plan(const model::Model& m, const KeepMask& keep, int64_t reference_len) {
  HP_CHECK(m.gated(), "compaction planning needs a gated model");
  HP_CHECK(reference_len > 0, "reference length must be positive");
  const auto& fab = m.fabric();
  check_mask(fab, keep);

  const model::Arch& a = m.arch();
  CompactionPlan p;
  auto kept_of = [&](int bank, int64_t total) {
    if (bank < 0) return all_idx(total);  // ungated: everything stays
    std::vector<int64_t> kept;
    for (int64_t j = 0; j < total; ++j)
      if (keep[static_cast<size_t>(bank)][static_cast<size_t>(j)]) kept.push_back(j);
    return kept;
  };
  for (size_t i = 0; i < a.conv.size(); ++i)
    p.conv_kept.push_back(kept_of(m.conv_bank(static_cast<int>(i)), a.conv[i].channels));
  for (size_t i = 0; i < a.blocks.size(); ++i) {
    p.head_kept.push_back(kept_of(m.head_bank(static_cast<int>(i)), a.blocks[i].heads));
    p.ffn_kept.push_back(kept_of(m.ffn_bank(static_cast<int>(i)), a.blocks[i].ffn));
  }
  p.realized_params = fab.remaining_params(keep);
  p.realized_sparsity = fab.realized_sparsity(keep);
  p.reference_len = reference_len;
  p.realized_flops = model::arch_flops(plan_arch(a, p), reference_len);
  return p;
}

model::Model compact(const model::Model& m, const CompactionPlan& plan) {
  plan.validate(m);
  const model::Arch& a = m.arch();
  model::Model out(plan_arch(a, plan), 0, /*gated=*/false);

  auto gather = [&](const std::string& name, const std::vector<std::vector<int64_t>>& idx) {
    if (!out.has_param(name)) return;  // sliced down to nothing
    gather_param(out.param(name), m.param(name), idx);
  };

  const int64_t D = a.d_model, dh = a.d_head;
  std::vector<int64_t> in_idx = all_idx(a.feat_dim);
  for (size_t i = 0; i < a.conv.size(); ++i) {
    const std::string p = "conv" + std::to_string(i);
    gather(p + ".w", {plan.conv_kept[i], in_idx, all_idx(a.conv[i].kernel)});
    gather(p + ".b", {plan.conv_kept[i]});
    in_idx = plan.conv_kept[i];
  }
  gather("pos", {all_idx(a.pos_len()), all_idx(D)});
  for (size_t i = 0; i < a.blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i);
    std::vector<int64_t> cols;  // head slices in the fused projection width
    for (int64_t h : plan.head_kept[i])
      for (int64_t c = 0; c < dh; ++c) cols.push_back(h * dh + c);
    gather(p + ".ln1.g", {all_idx(D)});
    gather(p + ".ln1.b", {all_idx(D)});
    gather(p + ".attn.wq", {all_idx(D), cols});
    gather(p + ".attn.bq", {cols});
    gather(p + ".attn.wk", {all_idx(D), cols});
    gather(p + ".attn.bk", {cols});
    gather(p + ".attn.wv", {all_idx(D), cols});
    gather(p + ".attn.bv", {cols});
    gather(p + ".attn.wo", {cols, all_idx(D)});
    gather(p + ".attn.bo", {all_idx(D)});
    gather(p + ".ln2.g", {all_idx(D)});
    gather(p + ".ln2.b", {all_idx(D)});
    gather(p + ".ffn.w1", {all_idx(D), plan.ffn_kept[i]});
    gather(p + ".ffn.b1", {plan.ffn_kept[i]});
    gather(p + ".ffn.w2", {plan.ffn_kept[i], all_idx(D)});
    gather(p + ".ffn.b2", {all_idx(D)});
  }
  const int64_t L = static_cast<int64_t>(a.blocks.size());
  gather("pool.wk", {all_idx(L)});
  gather("pool.wv", {all_idx(L)});
  gather("pool.q", {all_idx(a.pooling_heads), all_idx(D)});
  gather("pool.w", {all_idx(D), all_idx(a.embedding_dim)});
  gather("pool.b", {all_idx(a.embedding_dim)});
  if (a.head == model::HeadKind::kAam) {
    gather("head.w", {all_idx(a.num_classes), all_idx(a.embedding_dim)});
  } else {
    gather("head.w", {all_idx(a.embedding_dim)});
    gather("head.b", {all_idx(1)});
  }
  return out;
}

std::vector<Tensor> binary_gate_tensors(const fabric::GateFabric& fab, const KeepMask& keep) {
  check_mask(fab, keep);
  const auto& banks = fab.banks();
  std::vector<Tensor> out;
  for (size_t bi = 0; bi < banks.size(); ++bi) {
    Tensor g = Tensor::full({banks[bi].gates()}, 0.0, banks[bi].log_alpha.dtype(), false);
    for (size_t j = 0; j < keep[bi].size(); ++j)
      if (keep[bi][j]) g.set_value_at(static_cast<int64_t>(j), 1.0);
    out.push_back(g);
  }
  return out;
}

EquivalenceReport verify_equivalence(const model::Model& gated, const KeepMask& keep,
                                     const model::Model& compacted, int64_t n_inputs,
                                     uint64_t seed) {
  HP_CHECK(gated.gated(), "the equivalence reference must be a gated model");
  HP_CHECK(n_inputs > 0, "need at least one probe input");
  NoGradGuard ng;
  const std::vector<Tensor> gates = binary_gate_tensors(gated.fabric(), keep);
  const int64_t T = gated.arch().max_frames, F = gated.arch().feat_dim;

  EquivalenceReport rep;
  rep.inputs = n_inputs;
  for (int64_t i = 0; i < n_inputs; ++i) {
    Tensor x = Tensor::empty({1, T, F}, gated.arch().dtype, false);
    for (int64_t j = 0; j < x.numel(); ++j)
      x.set_value_at(j, rng::gaussian(seed, rng::kVerifyInputs, static_cast<uint64_t>(i),
                                      static_cast<uint64_t>(j)));
    Tensor a = gated.forward_given_gates(x, gates).embedding;
    Tensor b = compacted.forward_eval(x).embedding;
    HP_CHECK(a.numel() == b.numel(), "embedding width changed under compaction");
    for (int64_t j = 0; j < a.numel(); ++j)
      rep.max_abs_diff = std::max(rep.max_abs_diff, std::fabs(a.value_at(j) - b.value_at(j)));
  }
  rep.pass = rep.max_abs_diff < 1e-9;
  return rep;
}

std::string plan_to_text(const CompactionPlan& p) {
  kv::Items items;
  items.push_back({"reference_len", std::to_string(p.reference_len)});
  items.push_back({"realized_params", std::to_string(p.realized_params)});
  items.push_back({"realized_sparsity", kv::format_real(p.realized_sparsity)});
  items.push_back({"realized_flops", std::to_string(p.realized_flops)});
  auto put = [&](const std::string& key, const std::vector<int64_t>& kept) {
    std::ostringstream os;
    for (size_t j = 0; j < kept.size(); ++j) os << (j ? " " : "") << kept[j];
    items.push_back({key, os.str()});
  };
  for (size_t i = 0; i < p.conv_kept.size(); ++i)
    put("conv" + std::to_string(i) + ".kept", p.conv_kept[i]);
  for (size_t i = 0; i < p.head_kept.size(); ++i) {
    put("block" + std::to_string(i) + ".heads.kept", p.head_kept[i]);
    put("block" + std::to_string(i) + ".ffn.kept", p.ffn_kept[i]);
  }
  return kv::render(items);
}

CompactionPlan plan_from_text(const std::string& text) {
  CompactionPlan p;
  bool saw_len = false, saw_params = false, saw_sparsity = false, saw_flops = false;
  std::map<int64_t, std::vector<int64_t>> conv, heads, ffn;

  auto layer_of = [](const std::string& k, const std::string& prefix,
                     const std::string& suffix) -> int64_t {
    if (k.size() <= prefix.size() + suffix.size()) return -1;
    if (k.compare(0, prefix.size(), prefix) != 0) return -1;
    if (k.compare(k.size() - suffix.size(), suffix.size(), suffix) != 0) return -1;
    const std::string mid = k.substr(prefix.size(), k.size() - prefix.size() - suffix.size());
    if (mid.size() > 9 || mid.find_first_not_of("0123456789") != std::string::npos) return -1;
    return std::stoll(mid);
  };
  auto indices = [](const std::string& key, const std::string& v) {
    std::vector<int64_t> out;
    std::istringstream is(v);
    int64_t j;
    while (is >> j) out.push_back(j);
    HP_CHECK(is.eof(), "plan entry '" << key << "': \"" << v << "\" is not an index list");
    return out;
  };

  for (const auto& [k, v] : kv::parse(text)) {
    int64_t layer = -1;
    if (k == "reference_len") {
      p.reference_len = kv::to_int(k, v);
      saw_len = true;
    } else if (k == "realized_params") {
      p.realized_params = kv::to_int(k, v);
      saw_params = true;
    } else if (k == "realized_sparsity") {
      p.realized_sparsity = kv::to_real(k, v);
      saw_sparsity = true;
    } else if (k == "realized_flops") {
      p.realized_flops = kv::to_int(k, v);
      saw_flops = true;
    } else if ((layer = layer_of(k, "conv", ".kept")) >= 0) {
      conv[layer] = indices(k, v);
    } else if ((layer = layer_of(k, "block", ".heads.kept")) >= 0) {
      heads[layer] = indices(k, v);
    } else if ((layer = layer_of(k, "block", ".ffn.kept")) >= 0) {
      ffn[layer] = indices(k, v);
    } else {
      HP_CHECK(false, "unknown plan entry '" << k << "'");
    }
  }
  HP_CHECK(saw_len, "plan text is missing 'reference_len'");
  HP_CHECK(saw_params, "plan text is missing 'realized_params'");
  HP_CHECK(saw_sparsity, "plan text is missing 'realized_sparsity'");
  HP_CHECK(saw_flops, "plan text is missing 'realized_flops'");
  HP_CHECK(!conv.empty(), "plan text is missing 'conv0.kept'");
  const int64_t blocks = static_cast<int64_t>(std::max(heads.size(), ffn.size()));
  HP_CHECK(blocks > 0, "plan text is missing 'block0.heads.kept'");
  for (int64_t i = 0; i < static_cast<int64_t>(conv.size()); ++i) {
    auto it = conv.find(i);
    HP_CHECK(it != conv.end(), "plan text is missing 'conv" << i << ".kept'");
    p.conv_kept.push_back(std::move(it->second));
  }
  for (int64_t i = 0; i < blocks; ++i) {
    auto hit = heads.find(i);
    HP_CHECK(hit != heads.end(), "plan text is missing 'block" << i << ".heads.kept'");
    auto fit = ffn.find(i);
    HP_CHECK(fit != ffn.end(), "plan text is missing 'block" << i << ".ffn.kept'");
    p.head_kept.push_back(std::move(hit->second));
    p.ffn_kept.push_back(std::move(fit->second));
  }
  return p;
}

ckpt::Checkpoint compacted_checkpoint(const model::Model& m, const std::string& config_text,
                                      int64_t step, int64_t epoch) {
  HP_CHECK(!m.gated(), "finalized snapshots hold gate-free models");
  ckpt::Checkpoint c;
  c.compacted = true;
  c.step = step;
  c.epoch = epoch;
  c.config_text = config_text;
  c.arch = m.arch();
  for (const model::NamedParam& p : m.params()) c.params.push_back({p.name, p.t.to_vector()});
  return c;
}

model::Model restore_model(const ckpt::Checkpoint& c) {
  const bool gated = !c.log_alphas.empty();
  HP_CHECK(!(gated && c.compacted), "a finalized snapshot cannot carry gate banks");
  model::Model m(c.arch, 0, gated);
  HP_CHECK(c.params.size() == m.params().size(), "snapshot has " << c.params.size()
                                                                 << " parameters, model wants "
                                                                 << m.params().size());
  for (const ckpt::TensorBlob& b : c.params) {
    HP_CHECK(m.has_param(b.name), "snapshot parameter '" << b.name << "' not in the architecture");
    Tensor t = m.param(b.name);
    HP_CHECK(static_cast<int64_t>(b.data.size()) == t.numel(),
             "parameter '" << b.name << "' holds " << b.data.size() << " values, model wants "
                           << t.numel());
    std::memcpy(t.data<double>(), b.data.data(), b.data.size() * sizeof(double));
  }
  if (gated) {
    auto& banks = m.fabric().banks();
    HP_CHECK(c.log_alphas.size() == banks.size(), "snapshot has " << c.log_alphas.size()
                                                                  << " gate banks, model wants "
                                                                  << banks.size());
    for (size_t i = 0; i < banks.size(); ++i) {
      const ckpt::TensorBlob& b = c.log_alphas[i];
      HP_CHECK(b.name == banks[i].name, "gate bank order mismatch: snapshot '"
                                            << b.name << "' vs model '" << banks[i].name << "'");
      HP_CHECK(static_cast<int64_t>(b.data.size()) == banks[i].gates(),
               "gate bank '" << b.name << "' size mismatch");
      std::memcpy(banks[i].log_alpha.data<double>(), b.data.data(),
                  b.data.size() * sizeof(double));
    }
  }
  return m;
}

}  // namespace hp::compact
