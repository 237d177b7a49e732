#include "gate_fabric.hpp"

namespace hp::fabric {

const char* kind_name(Kind k) {
  switch (k) {
    case Kind::ConvChannel: return "conv";
    case Kind::MhsaHead: return "mhsa";
    case Kind::FfnNeuron: return "ffn";
  }
  return "?";
}

GateFabric::GateFabric(std::vector<GateBank> banks, std::vector<SharedBlock> shared,
                       int64_t fixed_params, int64_t model_param_count, hc::Params gate_params)
    : banks_(std::move(banks)), shared_(std::move(shared)), fixed_(fixed_params),
      total_(model_param_count), hc_(gate_params) {
  hc::validate(hc_);
  int64_t accounted = fixed_;
  for (const GateBank& b : banks_) {
    HP_CHECK(b.log_alpha.defined() && b.log_alpha.ndim() == 1 && b.gates() > 0,
             "gate bank " << b.name << " needs a 1-d log_alpha tensor");
    HP_CHECK(b.owned_per_gate >= 0, "gate bank " << b.name << " has negative owned count");
    accounted += b.owned_per_gate * b.gates();
  }
  for (const SharedBlock& s : shared_) {
    HP_CHECK(s.bank_a >= 0 && s.bank_a < static_cast<int>(banks_.size()) && s.bank_b >= 0 &&
                 s.bank_b < static_cast<int>(banks_.size()) && s.bank_a != s.bank_b,
             "shared block references invalid banks " << s.bank_a << "," << s.bank_b);
    HP_CHECK(s.per_pair > 0, "shared block must carry a positive per-pair count");
    accounted += s.per_pair * banks_[static_cast<size_t>(s.bank_a)].gates() *
                 banks_[static_cast<size_t>(s.bank_b)].gates();
  }
  HP_CHECK(accounted == total_, "gate accounting incomplete: buckets sum to "
                                    << accounted << " but the model holds " << total_
                                    << " parameters");
}

Tensor GateFabric::expected_remaining() const {
  Tensor acc = Tensor::scalar(static_cast<double>(fixed_));
  std::vector<Tensor> bank_psum(banks_.size());
  for (size_t i = 0; i < banks_.size(); ++i) {
    bank_psum[i] = ops::sum_all(hc::prob_nonzero_t(banks_[i].log_alpha, hc_));
    if (banks_[i].owned_per_gate > 0)
      acc = ops::add(acc, ops::mul_scalar(bank_psum[i], static_cast<double>(banks_[i].owned_per_gate)));
  }
  for (const SharedBlock& s : shared_) {
    Tensor pair = ops::mul(bank_psum[static_cast<size_t>(s.bank_a)],
                           bank_psum[static_cast<size_t>(s.bank_b)]);
    acc = ops::add(acc, ops::mul_scalar(pair, static_cast<double>(s.per_pair)));
  }
  return acc;
}

Tensor GateFabric::expected_sparsity() const {
  HP_CHECK(total_ > 0, "fabric with no parameters");
  return ops::add_scalar(ops::mul_scalar(expected_remaining(), -1.0 / static_cast<double>(total_)),
                         1.0);
}

double GateFabric::expected_sparsity_value() const {
  NoGradGuard ng;
  return expected_sparsity().item();
}

int64_t GateFabric::remaining_params(const std::vector<std::vector<uint8_t>>& keep) const {
  HP_CHECK(keep.size() == banks_.size(), "keep decision has " << keep.size() << " banks, fabric has "
                                                              << banks_.size());
  std::vector<int64_t> kept_count(banks_.size(), 0);
  int64_t remaining = fixed_;
  for (size_t i = 0; i < banks_.size(); ++i) {
    HP_CHECK(static_cast<int64_t>(keep[i].size()) == banks_[i].gates(),
             "keep decision for bank " << banks_[i].name << " has " << keep[i].size()
                                       << " entries for " << banks_[i].gates() << " gates");
    for (uint8_t k : keep[i]) kept_count[i] += k ? 1 : 0;
    remaining += banks_[i].owned_per_gate * kept_count[i];
  }
  for (const SharedBlock& s : shared_)
    remaining += s.per_pair * kept_count[static_cast<size_t>(s.bank_a)] *
                 kept_count[static_cast<size_t>(s.bank_b)];
  return remaining;
}

double GateFabric::realized_sparsity(const std::vector<std::vector<uint8_t>>& keep) const {
  return 1.0 - static_cast<double>(remaining_params(keep)) / static_cast<double>(total_);
}

std::vector<Tensor> GateFabric::gate_tensors() const {
  std::vector<Tensor> out;
  out.reserve(banks_.size());
  for (const GateBank& b : banks_) out.push_back(b.log_alpha);
  return out;
}

}  // namespace hp::fabric
