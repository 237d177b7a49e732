#include "optimizer.hpp"

#include <cmath>

namespace hp::optim {

void GroupConfig::validate() const {
  HP_CHECK(lr >= 0.0, "learning rate must be nonnegative, got " << lr);
  HP_CHECK(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
           "moment decays must lie in [0,1)");
  HP_CHECK(eps > 0.0, "eps must be positive");
  HP_CHECK(weight_decay >= 0.0, "weight decay must be nonnegative");
}

int AdamW::add_group(const std::vector<Tensor>& params, GroupConfig cfg) {
  cfg.validate();
  Group g;
  g.cfg = cfg;
  for (const Tensor& t : params) {
    HP_CHECK(t.defined() && t.requires_grad(), "optimizer parameters must require grad");
    Slot s;
    s.t = t;
    s.m.assign(static_cast<size_t>(t.numel()), 0.0);
    s.v.assign(static_cast<size_t>(t.numel()), 0.0);
    g.slots.push_back(std::move(s));
  }
  groups_.push_back(std::move(g));
  return static_cast<int>(groups_.size()) - 1;
}

void AdamW::zero_grad() {
  for (Group& g : groups_)
    for (Slot& s : g.slots) s.t.zero_grad();
}

void AdamW::step() {
  ++steps_;
  const double tstep = static_cast<double>(steps_);
  for (Group& g : groups_) {
    const GroupConfig& c = g.cfg;
    const double bc1 = 1.0 - std::pow(c.beta1, tstep);
    const double bc2 = 1.0 - std::pow(c.beta2, tstep);
    for (Slot& s : g.slots) {
      dispatch_dtype(s.t.dtype(), [&](auto tag) {
        using S = decltype(tag);
        S* p = s.t.impl()->template data_as<S>();
        const S* gr = !s.t.impl()->grad.empty() ? s.t.impl()->template grad_as<S>() : nullptr;
        const int64_t n = s.t.numel();
        for (int64_t i = 0; i < n; ++i) {
          const double gi = gr ? static_cast<double>(gr[i]) : 0.0;
          double& m = s.m[static_cast<size_t>(i)];
          double& v = s.v[static_cast<size_t>(i)];
          m = c.beta1 * m + (1.0 - c.beta1) * gi;
          v = c.beta2 * v + (1.0 - c.beta2) * gi * gi;
          const double update = (m / bc1) / (std::sqrt(v / bc2) + c.eps);
          const double pd = static_cast<double>(p[i]);
          p[i] = static_cast<S>(pd - c.lr * (update + c.weight_decay * pd));
        }
      });
    }
  }
}

double global_grad_norm(const std::vector<Tensor>& params) {
  double sq = 0.0;
  for (const Tensor& t : params) {
    if (!t.defined() || t.impl()->grad.empty()) continue;
    dispatch_dtype(t.dtype(), [&](auto tag) {
      using S = decltype(tag);
      const S* g = t.impl()->template grad_as<S>();
      for (int64_t i = 0; i < t.numel(); ++i) {
        const double gi = static_cast<double>(g[i]);
        sq += gi * gi;
      }
    });
  }
  return std::sqrt(sq);
}

double clip_global_norm(const std::vector<Tensor>& params, double max_norm) {
  HP_CHECK(max_norm > 0.0, "clip norm must be positive");
  const double norm = global_grad_norm(params);
  if (norm <= max_norm) return norm;
  const double scale = max_norm / norm;
  for (const Tensor& t : params) {
    if (!t.defined() || t.impl()->grad.empty()) continue;
    dispatch_dtype(t.dtype(), [&](auto tag) {
      using S = decltype(tag);
      S* g = t.impl()->template grad_as<S>();
      for (int64_t i = 0; i < t.numel(); ++i) g[i] = static_cast<S>(static_cast<double>(g[i]) * scale);
    });
  }
  return norm;
}

}  // namespace hp::optim
