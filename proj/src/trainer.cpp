#include "trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "common.hpp"
#include "objectives.hpp"
#include "ops.hpp"
#include "rng.hpp"

namespace hp::train {

void TrainConfig::validate() const {
  HP_CHECK(task == "toy_sv" || task == "toy_spoof",
           "unknown task '" << task << "' (want toy_sv or toy_spoof)");
  if (task == "toy_sv")
    HP_CHECK(preset == "sv_full" || preset == "sv_small_data",
             "preset '" << preset << "' does not apply to toy_sv (want sv_full or sv_small_data)");
  else
    HP_CHECK(preset == "spoof_default",
             "preset '" << preset << "' does not apply to toy_spoof (want spoof_default)");
  HP_CHECK(target_sparsity >= 0.0 && target_sparsity < 1.0,
           "target_sparsity must lie in [0,1), got " << target_sparsity);
  HP_CHECK(epochs > 0, "epochs must be positive, got " << epochs);
  HP_CHECK(batch_size > 0, "batch_size must be positive, got " << batch_size);
  HP_CHECK(lr_weights > 0 && lr_gates > 0 && lr_multipliers > 0,
           "all learning rates must be positive");
  HP_CHECK(weight_decay >= 0, "weight_decay must be nonnegative, got " << weight_decay);
  HP_CHECK(clip_norm > 0, "clip_norm must be positive, got " << clip_norm);
  HP_CHECK(warmup_epochs > 0, "warmup_epochs must be positive, got " << warmup_epochs);
  HP_CHECK(eval_every >= 0, "eval_every must be nonnegative, got " << eval_every);
  HP_CHECK(checkpoint_every >= 0, "checkpoint_every must be nonnegative, got "
                                      << checkpoint_every);
}

void apply_kv(TrainConfig& c, const std::string& key, const std::string& value) {
  if (key == "task") c.task = value;
  else if (key == "preset") c.preset = value;
  else if (key == "target_sparsity") c.target_sparsity = kv::to_real(key, value);
  else if (key == "epochs") c.epochs = kv::to_int(key, value);
  else if (key == "batch_size") c.batch_size = kv::to_int(key, value);
  else if (key == "lr_weights") c.lr_weights = kv::to_real(key, value);
  else if (key == "lr_gates") c.lr_gates = kv::to_real(key, value);
  else if (key == "lr_multipliers") c.lr_multipliers = kv::to_real(key, value);
  else if (key == "weight_decay") c.weight_decay = kv::to_real(key, value);
  else if (key == "clip_norm") c.clip_norm = kv::to_real(key, value);
  else if (key == "warmup_epochs") c.warmup_epochs = kv::to_real(key, value);
  else if (key == "seed") c.seed = kv::to_uint(key, value);
  else if (key == "eval_every") c.eval_every = kv::to_int(key, value);
  else if (key == "checkpoint_every") c.checkpoint_every = kv::to_int(key, value);
  else if (key == "out_dir") c.out_dir = value;
  else HP_CHECK(false, "unknown config key '" << key << "'");
}

TrainConfig config_from_kv(const kv::Items& items, TrainConfig base) {
  for (const auto& [k, v] : items) apply_kv(base, k, v);
  return base;
}

kv::Items config_to_kv(const TrainConfig& c) {
  return {{"task", c.task},
          {"preset", c.preset},
          {"target_sparsity", kv::format_real(c.target_sparsity)},
          {"epochs", std::to_string(c.epochs)},
          {"batch_size", std::to_string(c.batch_size)},
          {"lr_weights", kv::format_real(c.lr_weights)},
          {"lr_gates", kv::format_real(c.lr_gates)},
          {"lr_multipliers", kv::format_real(c.lr_multipliers)},
          {"weight_decay", kv::format_real(c.weight_decay)},
          {"clip_norm", kv::format_real(c.clip_norm)},
          {"warmup_epochs", kv::format_real(c.warmup_epochs)},
          {"seed", std::to_string(c.seed)},
          {"eval_every", std::to_string(c.eval_every)},
          {"checkpoint_every", std::to_string(c.checkpoint_every)},
          {"out_dir", c.out_dir}};
}

std::string StepRecord::to_json() const {
  std::string s = "{\"step\":" + std::to_string(step);
  s += ",\"epoch\":" + kv::format_real(epoch);
  s += ",\"task_loss\":" + kv::format_real(task_loss);
  s += ",\"reg_loss\":" + kv::format_real(reg_loss);
  s += ",\"s_hat\":" + kv::format_real(s_hat);
  s += ",\"t_now\":" + kv::format_real(t_now);
  s += ",\"lambda1\":" + kv::format_real(lambda1);
  s += ",\"lambda2\":" + kv::format_real(lambda2);
  s += ",\"lr\":" + kv::format_real(lr);
  if (eer) s += ",\"eer\":" + kv::format_real(*eer);
  if (min_dcf) s += ",\"min_dcf\":" + kv::format_real(*min_dcf);
  if (accuracy) s += ",\"accuracy\":" + kv::format_real(*accuracy);
  return s + "}";
}

Session::Session(TrainConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  build_data();
  model::Arch arch;
  if (is_sv_)
    arch = model::small_arch(sv_.spec.feat_dim, model::HeadKind::kAam, sv_.spec.num_classes,
                             sv_.spec.frames);
  else
    arch = model::small_arch(spoof_.spec.feat_dim, model::HeadKind::kBinary, 2,
                             spoof_.spec.frames);
  model_ = std::make_unique<model::Model>(arch, cfg_.seed, /*gated=*/true);
  ctrl_ = {0.0, 0.0, cfg_.target_sparsity, cfg_.warmup_epochs, cfg_.lr_multipliers};
  ctrl_.validate();
  attach_optimizer();
}

Session::Session(const ckpt::Checkpoint& snapshot) : cfg_(config_from_kv(kv::parse(snapshot.config_text))) {
  HP_CHECK(!snapshot.compacted, "cannot resume training from a compacted snapshot");
  cfg_.validate();
  build_data();
  model_ = std::make_unique<model::Model>(snapshot.arch, cfg_.seed, /*gated=*/true);

  HP_CHECK(snapshot.params.size() == model_->params().size(),
           "snapshot has " << snapshot.params.size() << " parameters, model wants "
                           << model_->params().size());
  for (const ckpt::TensorBlob& b : snapshot.params) {
    Tensor t = model_->param(b.name);
    HP_CHECK(int64_t(b.data.size()) == t.numel(), "parameter '" << b.name << "' holds "
                                                                << b.data.size()
                                                                << " values, model wants "
                                                                << t.numel());
    std::memcpy(t.data<double>(), b.data.data(), b.data.size() * sizeof(double));
  }

  auto& banks = model_->fabric().banks();
  HP_CHECK(snapshot.log_alphas.size() == banks.size(),
           "snapshot has " << snapshot.log_alphas.size() << " gate banks, model wants "
                           << banks.size());
  for (size_t i = 0; i < banks.size(); ++i) {
    const ckpt::TensorBlob& b = snapshot.log_alphas[i];
    HP_CHECK(b.name == banks[i].name, "gate bank order mismatch: snapshot '"
                                          << b.name << "' vs model '" << banks[i].name << "'");
    HP_CHECK(int64_t(b.data.size()) == banks[i].gates(),
             "gate bank '" << b.name << "' size mismatch");
    std::memcpy(banks[i].log_alpha.data<double>(), b.data.data(),
                b.data.size() * sizeof(double));
  }

  ctrl_ = {snapshot.lambda1, snapshot.lambda2, cfg_.target_sparsity, cfg_.warmup_epochs,
           cfg_.lr_multipliers};
  ctrl_.validate();
  attach_optimizer();

  HP_CHECK(snapshot.opt_groups.size() == opt_.groups().size(), "optimizer group count mismatch");
  for (size_t g = 0; g < snapshot.opt_groups.size(); ++g) {
    auto& slots = opt_.groups()[g].slots;
    const auto& saved = snapshot.opt_groups[g].slots;
    HP_CHECK(saved.size() == slots.size(), "optimizer slot count mismatch in group " << g);
    for (size_t i = 0; i < slots.size(); ++i) {
      HP_CHECK(saved[i].m.size() == slots[i].m.size() && saved[i].v.size() == slots[i].v.size(),
               "optimizer moment size mismatch in group " << g << " slot " << i);
      slots[i].m = saved[i].m;
      slots[i].v = saved[i].v;
    }
  }
  opt_.set_steps(snapshot.opt_steps);
  step_ = snapshot.step;
}

void Session::build_data() {
  is_sv_ = cfg_.task == "toy_sv";
  int64_t n_train = 0;
  if (is_sv_) {
    sv_ = task::gen_sv(cfg_.preset == "sv_full" ? task::sv_full(cfg_.seed)
                                                : task::sv_small_data(cfg_.seed));
    n_train = int64_t(sv_.train.size());
  } else {
    spoof_ = task::gen_spoof(task::spoof_default(cfg_.seed));
    n_train = int64_t(spoof_.train.size());
  }
  HP_CHECK(n_train >= cfg_.batch_size, "batch_size " << cfg_.batch_size
                                                     << " exceeds the training set of "
                                                     << n_train);
  steps_per_epoch_ = n_train / cfg_.batch_size;  // trailing remainder dropped
}

void Session::attach_optimizer() {
  std::vector<Tensor> weights;
  for (const model::NamedParam& p : model_->params()) weights.push_back(p.t);
  optim::GroupConfig wcfg;
  wcfg.lr = cfg_.lr_weights;
  wcfg.weight_decay = cfg_.weight_decay;
  group_weights_ = opt_.add_group(weights, wcfg);

  optim::GroupConfig gcfg;
  gcfg.lr = cfg_.lr_gates;
  gcfg.weight_decay = 0.0;
  group_gates_ = opt_.add_group(model_->fabric().gate_tensors(), gcfg);
}

void Session::batch_for_step(int64_t step, Tensor& x, std::vector<int64_t>& labels) const {
  HP_CHECK(step >= 0, "negative step " << step);
  const std::vector<task::Utterance>& train_set = is_sv_ ? sv_.train : spoof_.train;
  const int64_t n = int64_t(train_set.size());
  const int64_t epoch = step / steps_per_epoch_;
  const int64_t batch = step % steps_per_epoch_;

  std::vector<int64_t> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  for (int64_t i = n - 1; i >= 1; --i) {
    const int64_t j =
        int64_t(rng::uniform_index(uint64_t(i) + 1, cfg_.seed, rng::kShuffle, uint64_t(epoch),
                                   uint64_t(i)));
    std::swap(perm[size_t(i)], perm[size_t(j)]);
  }

  const int64_t B = cfg_.batch_size;
  const int64_t T = train_set[0].x.shape()[0];
  const int64_t F = train_set[0].x.shape()[1];
  x = Tensor::empty({B, T, F});
  labels.assign(size_t(B), 0);
  double* xd = x.data<double>();
  for (int64_t k = 0; k < B; ++k) {
    const task::Utterance& u = train_set[size_t(perm[size_t(batch * B + k)])];
    std::memcpy(xd + k * T * F, u.x.data<double>(), size_t(T * F) * sizeof(double));
    labels[size_t(k)] = u.label;
  }
}

Tensor Session::task_loss(const model::Model::Output& out,
                          const std::vector<int64_t>& labels) const {
  if (is_sv_) return obj::aam_loss(out.embedding, labels, model_->param("head.w"));
  std::vector<int> lab01(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) lab01[i] = int(labels[i]);
  return obj::bce_loss(obj::binary_logits(out.embedding, model_->param("head.w"),
                                          model_->param("head.b")),
                       lab01);
}

void Session::abort_non_finite(const char* what, double value, const Tensor& x,
                               const std::vector<int64_t>& labels) const {
  std::ostringstream ss;
  ss << "non-finite " << what << " (" << value << ") at step " << step_ << "\n";
  ss << "  batch: " << shape_str(x.shape()) << ", labels[" << labels.size() << "] = {";
  for (size_t i = 0; i < labels.size() && i < 8; ++i) ss << (i ? "," : "") << labels[i];
  if (labels.size() > 8) ss << ",...";
  ss << "}\n";
  const double* xd = x.data<double>();
  double lo = xd[0], hi = xd[0], mean = 0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    lo = std::min(lo, xd[i]);
    hi = std::max(hi, xd[i]);
    mean += xd[i];
  }
  ss << "  input min/mean/max = " << lo << " / " << mean / double(x.numel()) << " / " << hi
     << "\n";
  ss << "  multipliers lambda1=" << ctrl_.lambda1 << " lambda2=" << ctrl_.lambda2 << "\n";
  for (const fabric::GateBank& b : model_->fabric().banks()) {
    const double* la = b.log_alpha.data<double>();
    double blo = la[0], bhi = la[0], bmean = 0;
    for (int64_t i = 0; i < b.gates(); ++i) {
      blo = std::min(blo, la[i]);
      bhi = std::max(bhi, la[i]);
      bmean += la[i];
    }
    ss << "  gates " << b.name << ": log_alpha min/mean/max = " << blo << " / "
       << bmean / double(b.gates()) << " / " << bhi << "\n";
  }
  fail(ss.str());
}

StepRecord Session::step_on(const Tensor& x, const std::vector<int64_t>& labels) {
  const double progress = epoch_progress();
  const double t_now = ctrl::scheduled_target(ctrl_, progress);

  model::Model::Output out = model_->forward_train(x, cfg_.seed, step_);
  Tensor l_task = task_loss(out, labels);
  Tensor s_hat = model_->fabric().expected_sparsity();
  Tensor reg = ctrl::regularizer(ctrl_, s_hat, t_now);

  const double task_v = l_task.item();
  const double reg_v = reg.item();
  const double s_hat_pre = s_hat.item();  // violation for the ascent, pre-descent
  if (!std::isfinite(task_v)) abort_non_finite("task loss", task_v, x, labels);
  if (!std::isfinite(reg_v)) abort_non_finite("regularizer", reg_v, x, labels);

  opt_.zero_grad();
  backward(ops::add(l_task, reg));

  std::vector<Tensor> trained;
  for (const model::NamedParam& p : model_->params()) trained.push_back(p.t);
  for (const Tensor& t : model_->fabric().gate_tensors()) trained.push_back(t);
  optim::clip_global_norm(trained, cfg_.clip_norm);
  opt_.step();
  ctrl::ascend_multipliers(ctrl_, s_hat_pre, t_now);
  Tape::instance().clear();

  StepRecord rec;
  rec.step = step_;
  rec.epoch = progress;
  rec.task_loss = task_v;
  rec.reg_loss = reg_v;
  rec.s_hat = s_hat_pre;
  rec.t_now = t_now;
  rec.lambda1 = ctrl_.lambda1;  // post-ascent, what the next step will use
  rec.lambda2 = ctrl_.lambda2;
  rec.lr = cfg_.lr_weights;
  ++step_;
  return rec;
}

StepRecord Session::train_step() {
  Tensor x;
  std::vector<int64_t> labels;
  batch_for_step(step_, x, labels);
  return step_on(x, labels);
}

namespace {

std::vector<std::vector<double>> embed_set(const model::Model& m,
                                           const std::vector<task::Utterance>& eval_set,
                                           int64_t batch_size) {
  NoGradGuard ng;
  HP_CHECK(!eval_set.empty(), "empty eval split");
  const int64_t T = eval_set[0].x.shape()[0];
  const int64_t F = eval_set[0].x.shape()[1];
  std::vector<std::vector<double>> emb;
  emb.reserve(eval_set.size());
  for (size_t at = 0; at < eval_set.size();) {
    const int64_t b = std::min<int64_t>(batch_size, int64_t(eval_set.size() - at));
    Tensor x = Tensor::empty({b, T, F});
    double* xd = x.data<double>();
    for (int64_t k = 0; k < b; ++k)
      std::memcpy(xd + k * T * F, eval_set[at + size_t(k)].x.data<double>(),
                  size_t(T * F) * sizeof(double));
    const Tensor e = m.forward_eval(x).embedding;
    const double* ed = e.data<double>();
    const int64_t E = e.shape()[1];
    for (int64_t k = 0; k < b; ++k) emb.emplace_back(ed + k * E, ed + (k + 1) * E);
    at += size_t(b);
  }
  return emb;
}

EvalResult eval_sv_on(const model::Model& m, const task::SvData& d, int64_t batch_size) {
  EvalResult r;
  const metrics::TrialScores s =
      metrics::score_trials(embed_set(m, d.eval, batch_size), d.trials);
  r.eer = metrics::eer(s);
  r.min_dcf = metrics::min_dcf(s);
  return r;
}

EvalResult eval_spoof_on(const model::Model& m, const task::SpoofData& d, int64_t batch_size) {
  EvalResult r;
  const std::vector<std::vector<double>> emb = embed_set(m, d.eval, batch_size);
  const std::vector<double> w = m.param("head.w").to_vector();
  const double b = m.param("head.b").item();
  std::vector<int64_t> pred, want;
  for (size_t i = 0; i < emb.size(); ++i) {
    double logit = b;
    for (size_t j = 0; j < w.size(); ++j) logit += emb[i][j] * w[j];
    pred.push_back(logit > 0 ? 1 : 0);
    want.push_back(d.eval[i].label);
  }
  r.accuracy = metrics::accuracy(pred, want);
  return r;
}

}  // namespace

EvalResult Session::evaluate() const {
  NoGradGuard ng;
  return is_sv_ ? eval_sv_on(*model_, sv_, cfg_.batch_size)
                : eval_spoof_on(*model_, spoof_, cfg_.batch_size);
}

EvalResult evaluate_model(const model::Model& m, const TrainConfig& cfg) {
  cfg.validate();
  NoGradGuard ng;
  if (cfg.task == "toy_sv") {
    const task::SvData d = task::gen_sv(cfg.preset == "sv_full" ? task::sv_full(cfg.seed)
                                                                : task::sv_small_data(cfg.seed));
    return eval_sv_on(m, d, cfg.batch_size);
  }
  const task::SpoofData d = task::gen_spoof(task::spoof_default(cfg.seed));
  return eval_spoof_on(m, d, cfg.batch_size);
}

ckpt::Checkpoint Session::snapshot() const {
  ckpt::Checkpoint c;
  c.compacted = false;
  c.step = step_;
  c.epoch = step_ / steps_per_epoch_;
  c.config_text = kv::render(config_to_kv(cfg_));
  c.arch = model_->arch();
  for (const model::NamedParam& p : model_->params())
    c.params.push_back({p.name, p.t.to_vector()});
  for (const fabric::GateBank& b : model_->fabric().banks())
    c.log_alphas.push_back({b.name, b.log_alpha.to_vector()});
  c.lambda1 = ctrl_.lambda1;
  c.lambda2 = ctrl_.lambda2;
  c.opt_steps = opt_.steps();
  for (const optim::AdamW::Group& g : opt_.groups()) {
    ckpt::OptGroupState gs;
    for (const optim::AdamW::Slot& s : g.slots) gs.slots.push_back({s.m, s.v});
    c.opt_groups.push_back(std::move(gs));
  }
  return c;
}

FitResult Session::fit() {
  FitResult res;
  const bool files = !cfg_.out_dir.empty();
  std::ofstream log;
  if (files) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(cfg_.out_dir) / "checkpoints");
    std::ofstream cf(fs::path(cfg_.out_dir) / "config.kv", std::ios::trunc);
    HP_CHECK(cf.good(), "cannot write config copy under '" << cfg_.out_dir << "'");
    cf << kv::render(config_to_kv(cfg_));
    cf.close();
    HP_CHECK(cf.good(), "short write of config copy");
    log.open(fs::path(cfg_.out_dir) / "metrics.log",
             step_ > 0 ? std::ios::app : std::ios::trunc);
    HP_CHECK(log.good(), "cannot open metrics log under '" << cfg_.out_dir << "'");
  }

  bool evaled = false;
  while (step_ < total_steps()) {
    StepRecord rec = train_step();
    const bool last = step_ == total_steps();
    const bool eval_due = last || (cfg_.eval_every > 0 ? step_ % cfg_.eval_every == 0
                                                       : step_ % steps_per_epoch_ == 0);
    if (eval_due) {
      const EvalResult ev = evaluate();
      rec.eer = ev.eer;
      rec.min_dcf = ev.min_dcf;
      rec.accuracy = ev.accuracy;
      res.final_eval = ev;
      evaled = true;
    }
    if (files) {
      log << rec.to_json() << "\n";
      HP_CHECK(log.good(), "failed writing metrics log");
    }
    const bool ckpt_due = !last && (cfg_.checkpoint_every > 0
                                        ? step_ % cfg_.checkpoint_every == 0
                                        : step_ % steps_per_epoch_ == 0);
    if (files && ckpt_due)
      ckpt::save((std::filesystem::path(cfg_.out_dir) / "checkpoints" /
                  ("step_" + std::to_string(step_) + ".ckpt"))
                     .string(),
                 snapshot());
    res.records.push_back(std::move(rec));
  }
  if (!evaled) res.final_eval = evaluate();

  {
    NoGradGuard ng;
    res.final_expected_sparsity = model_->fabric().expected_sparsity_value();
  }
  if (files) {
    const std::string final_path =
        (std::filesystem::path(cfg_.out_dir) / "final.ckpt").string();
    ckpt::save(final_path, snapshot());
    res.final_checkpoint = final_path;
  }
  return res;
}

}  // namespace hp::train
