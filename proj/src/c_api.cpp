#include "hybridprune.h"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "compactor.hpp"
#include "json.hpp"
#include "kvconfig.hpp"
#include "metrics.hpp"
#include "rng.hpp"
#include "trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

struct hp_model {
  hp::ckpt::Checkpoint snap;
  std::unique_ptr<hp::model::Model> net;
  std::string path;
};

namespace {

thread_local std::string g_err;

char* dup_string(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (p != nullptr) std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

hp_status fail(hp_status st, const std::string& msg) {
  g_err = msg;
  return st;
}

// Runs `f` (which returns hp_status); exceptions become `on_throw`.
template <class F>
hp_status guarded(hp_status on_throw, F&& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    return fail(on_throw, e.what());
  } catch (...) {
    return fail(on_throw, "unknown failure");
  }
}

hp::train::TrainConfig parse_config(const char* text) {
  return hp::train::config_from_kv(hp::kv::parse(text == nullptr ? "" : text));
}

void put(hp::kv::Items& items, const std::string& k, const std::string& v) {
  items.push_back({k, v});
}
void put(hp::kv::Items& items, const std::string& k, int64_t v) {
  items.push_back({k, std::to_string(v)});
}
void put(hp::kv::Items& items, const std::string& k, double v) {
  items.push_back({k, hp::kv::format_real(v)});
}

void put_metrics(hp::kv::Items& items, const hp::train::EvalResult& ev) {
  if (ev.eer) put(items, "eer", *ev.eer);
  if (ev.min_dcf) put(items, "min_dcf", *ev.min_dcf);
  if (ev.accuracy) put(items, "accuracy", *ev.accuracy);
}

void write_text_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  HP_CHECK(f.good(), "cannot open '" << p.string() << "' for writing");
  f << text;
  f.close();
  HP_CHECK(f.good(), "short write to '" << p.string() << "'");
}

std::string read_text_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  HP_CHECK(f.good(), "cannot open '" << p.string() << "'");
  std::ostringstream out;
  out << f.rdbuf();
  return out.str();
}

// ---- finalization, shared by hp_model_finalize and hp_sweep ----

struct Finalized {
  hp::compact::KeepMask keep;
  hp::compact::CompactionPlan plan;
  std::unique_ptr<hp::model::Model> cm;
  hp::compact::EquivalenceReport rep;
};

Finalized finalize_model(const hp::model::Model& net, double target) {
  hp::NoGradGuard ng;
  Finalized f;
  f.keep = hp::compact::binarize(net.fabric(), target);
  f.plan = hp::compact::make_plan(net, f.keep, net.arch().max_frames);
  f.cm = std::make_unique<hp::model::Model>(hp::compact::compact(net, f.plan));
  f.rep = hp::compact::verify_equivalence(net, f.keep, *f.cm, 8, 424242);
  return f;
}

// Writes compacted.ckpt, plan.txt, retention.csv; call only after rep.pass.
void write_finalized(const fs::path& dir, const Finalized& f, const hp::model::Model& net,
                     const hp::ckpt::Checkpoint& snap) {
  fs::create_directories(dir);
  hp::ckpt::save((dir / "compacted.ckpt").string(),
                 hp::compact::compacted_checkpoint(*f.cm, snap.config_text, snap.step,
                                                   snap.epoch));
  write_text_file(dir / "plan.txt", hp::compact::plan_to_text(f.plan));
  write_text_file(dir / "retention.csv",
                  hp::metrics::retention_csv(hp::metrics::retention_pattern(net.fabric(),
                                                                            f.keep)));
}

void finalize_items(hp::kv::Items& items, const Finalized& f, const hp::model::Model& net,
                    double target) {
  put(items, "target_sparsity", target);
  put(items, "realized_sparsity", f.plan.realized_sparsity);
  put(items, "realized_params", f.plan.realized_params);
  put(items, "original_params", net.count_params());
  put(items, "realized_flops", f.plan.realized_flops);
  put(items, "original_flops", net.count_flops(f.plan.reference_len));
  put(items, "verify_inputs", f.rep.inputs);
  put(items, "verify_max_abs_diff", f.rep.max_abs_diff);
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string csv_cell(const std::optional<double>& v) {
  return v ? hp::kv::format_real(*v) : std::string();
}

// ---- selftest helpers ----

// Central finite differences on sampled coordinates against one backward
// sweep; `f` must be a pure function of the leaf tensors.
struct FdCheck {
  int64_t checked = 0;
  double max_rel_err = 0.0;
};

double rel_err(double got, double want) {
  const double denom = std::max({std::fabs(got), std::fabs(want), 1e-3});
  return std::fabs(got - want) / denom;
}

template <class F>
FdCheck fd_check(const F& f, std::vector<hp::Tensor> leaves, int64_t per_leaf, uint64_t seed) {
  hp::Tape::instance().clear();
  for (auto& t : leaves) t.zero_grad();
  hp::Tensor loss = f();
  hp::backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& t : leaves) analytic.push_back(t.grad_to_vector());
  hp::Tape::instance().clear();

  FdCheck res;
  hp::NoGradGuard ng;
  const double h = 1e-6;
  for (size_t ti = 0; ti < leaves.size(); ++ti) {
    hp::Tensor& t = leaves[ti];
    if (!t.requires_grad()) continue;
    const int64_t n = std::min<int64_t>(per_leaf, t.numel());
    for (int64_t k = 0; k < n; ++k) {
      const int64_t i = static_cast<int64_t>(
          hp::rng::uniform_index(static_cast<uint64_t>(t.numel()), seed, hp::rng::kMonteCarlo,
                                 static_cast<uint64_t>(ti), static_cast<uint64_t>(k)));
      const double orig = t.value_at(i);
      t.set_value_at(i, orig + h);
      const double up = f().item();
      t.set_value_at(i, orig - h);
      const double dn = f().item();
      t.set_value_at(i, orig);
      const double fd = (up - dn) / (2.0 * h);
      res.max_rel_err = std::max(res.max_rel_err, rel_err(analytic[ti][size_t(i)], fd));
      ++res.checked;
    }
  }
  return res;
}

hp::model::Arch selftest_arch() {
  hp::model::Arch a;
  a.feat_dim = 4;
  a.conv = {{6, 2, 1}, {8, 2, 1}};
  a.blocks = {{2, 12}};
  a.d_model = 8;
  a.d_head = 4;
  a.pooling_heads = 2;
  a.embedding_dim = 4;
  a.head = hp::model::HeadKind::kBinary;
  a.num_classes = 2;
  a.max_frames = 6;
  return a;
}

}  // namespace

extern "C" {

const char* hp_version(void) { return "hybridprune 0.1.0"; }

const char* hp_last_error(void) { return g_err.c_str(); }

void hp_string_free(char* s) { std::free(s); }

hp_status hp_default_config(char** out_config) {
  if (out_config == nullptr) return fail(HP_ERR_ARGUMENT, "out_config is null");
  return guarded(HP_ERR_FAILED, [&] {
    *out_config = dup_string(hp::kv::render(hp::train::config_to_kv({})));
    return HP_OK;
  });
}

hp_status hp_train(const char* config, char** out_summary) {
  if (config == nullptr) return fail(HP_ERR_ARGUMENT, "config is null");
  if (out_summary == nullptr) return fail(HP_ERR_ARGUMENT, "out_summary is null");
  hp::train::TrainConfig cfg;
  try {
    cfg = parse_config(config);
    cfg.validate();
  } catch (const std::exception& e) {
    return fail(HP_ERR_ARGUMENT, e.what());
  }
  return guarded(HP_ERR_FAILED, [&] {
    hp::train::Session session(cfg);
    const hp::train::FitResult r = session.fit();
    hp::kv::Items items;
    put(items, "task", cfg.task);
    put(items, "preset", cfg.preset);
    put(items, "target_sparsity", cfg.target_sparsity);
    put(items, "seed", static_cast<int64_t>(cfg.seed));
    put(items, "epochs", cfg.epochs);
    put(items, "steps", session.step());
    put(items, "expected_sparsity", r.final_expected_sparsity);
    put_metrics(items, r.final_eval);
    if (!cfg.out_dir.empty()) {
      put(items, "out_dir", cfg.out_dir);
      put(items, "final_checkpoint", r.final_checkpoint);
    }
    *out_summary = dup_string(hp::kv::render(items));
    return HP_OK;
  });
}

hp_status hp_model_open(const char* checkpoint_path, hp_model** out_model) {
  if (checkpoint_path == nullptr) return fail(HP_ERR_ARGUMENT, "checkpoint_path is null");
  if (out_model == nullptr) return fail(HP_ERR_ARGUMENT, "out_model is null");
  return guarded(HP_ERR_FAILED, [&] {
    auto m = std::make_unique<hp_model>();
    m->snap = hp::ckpt::load(checkpoint_path);
    m->net = std::make_unique<hp::model::Model>(hp::compact::restore_model(m->snap));
    m->path = checkpoint_path;
    *out_model = m.release();
    return HP_OK;
  });
}

void hp_model_close(hp_model* m) { delete m; }

hp_status hp_model_info(const hp_model* m, char** out_info) {
  if (m == nullptr) return fail(HP_ERR_ARGUMENT, "model handle is null");
  if (out_info == nullptr) return fail(HP_ERR_ARGUMENT, "out_info is null");
  return guarded(HP_ERR_FAILED, [&] {
    const hp::model::Arch& a = m->net->arch();
    hp::kv::Items items;
    put(items, "path", m->path);
    put(items, "compacted", static_cast<int64_t>(m->snap.compacted ? 1 : 0));
    put(items, "step", m->snap.step);
    put(items, "epoch", m->snap.epoch);
    put(items, "params", m->net->count_params());
    put(items, "flops", m->net->count_flops(a.max_frames));
    put(items, "feat_dim", a.feat_dim);
    put(items, "max_frames", a.max_frames);
    put(items, "d_model", a.d_model);
    put(items, "blocks", static_cast<int64_t>(a.blocks.size()));
    put(items, "embedding_dim", a.embedding_dim);
    if (m->net->gated()) {
      hp::NoGradGuard ng;
      put(items, "expected_sparsity", m->net->fabric().expected_sparsity_value());
    }
    try {
      const hp::train::TrainConfig cfg = parse_config(m->snap.config_text.c_str());
      put(items, "task", cfg.task);
      put(items, "preset", cfg.preset);
      put(items, "target_sparsity", cfg.target_sparsity);
      put(items, "seed", static_cast<int64_t>(cfg.seed));
    } catch (const std::exception&) {
      // config text from a foreign producer; size facts above still stand
    }
    *out_info = dup_string(hp::kv::render(items));
    return HP_OK;
  });
}

hp_status hp_model_eval(const hp_model* m, const char* overrides, char** out_metrics) {
  if (m == nullptr) return fail(HP_ERR_ARGUMENT, "model handle is null");
  if (out_metrics == nullptr) return fail(HP_ERR_ARGUMENT, "out_metrics is null");
  hp::train::TrainConfig cfg;
  try {
    cfg = parse_config(m->snap.config_text.c_str());
    if (overrides != nullptr && overrides[0] != '\0')
      cfg = hp::train::config_from_kv(hp::kv::parse(overrides), cfg);
    cfg.validate();
  } catch (const std::exception& e) {
    return fail(HP_ERR_ARGUMENT, e.what());
  }
  return guarded(HP_ERR_FAILED, [&] {
    const hp::train::EvalResult ev = hp::train::evaluate_model(*m->net, cfg);
    hp::kv::Items items;
    put(items, "task", cfg.task);
    put(items, "preset", cfg.preset);
    put(items, "seed", static_cast<int64_t>(cfg.seed));
    put_metrics(items, ev);
    *out_metrics = dup_string(hp::kv::render(items));
    return HP_OK;
  });
}

hp_status hp_model_finalize(const hp_model* m, double target_sparsity, const char* out_dir,
                            char** out_summary) {
  if (m == nullptr) return fail(HP_ERR_ARGUMENT, "model handle is null");
  if (out_dir == nullptr || out_dir[0] == '\0') return fail(HP_ERR_ARGUMENT, "out_dir is empty");
  if (out_summary == nullptr) return fail(HP_ERR_ARGUMENT, "out_summary is null");
  if (!m->net->gated())
    return fail(HP_ERR_ARGUMENT, "checkpoint '" + m->path + "' is already finalized");
  if (!(target_sparsity >= 0.0 && target_sparsity < 1.0))
    return fail(HP_ERR_ARGUMENT, "target sparsity must lie in [0, 1), got " +
                                     hp::kv::format_real(target_sparsity));
  return guarded(HP_ERR_FAILED, [&] {
    const Finalized f = finalize_model(*m->net, target_sparsity);
    if (!f.rep.pass)
      return fail(HP_ERR_VERIFY,
                  "compacted model diverges from the gated reference (max abs diff " +
                      hp::kv::format_real(f.rep.max_abs_diff) + " over " +
                      std::to_string(f.rep.inputs) + " inputs); nothing was written");
    write_finalized(out_dir, f, *m->net, m->snap);
    hp::kv::Items items;
    finalize_items(items, f, *m->net, target_sparsity);
    put(items, "checkpoint", (fs::path(out_dir) / "compacted.ckpt").string());
    put(items, "plan", (fs::path(out_dir) / "plan.txt").string());
    put(items, "retention", (fs::path(out_dir) / "retention.csv").string());
    *out_summary = dup_string(hp::kv::render(items));
    return HP_OK;
  });
}

hp_status hp_report(const char* run_dir, char** out_csv) {
  if (run_dir == nullptr || run_dir[0] == '\0') return fail(HP_ERR_ARGUMENT, "run_dir is empty");
  if (out_csv == nullptr) return fail(HP_ERR_ARGUMENT, "out_csv is null");
  return guarded(HP_ERR_FAILED, [&] {
    const fs::path dir(run_dir);
    HP_CHECK(fs::exists(dir / "metrics.log"), "no metrics log under '" << run_dir << "'");
    std::ostringstream csv;
    csv << "section,step,epoch,series,value\n";

    std::istringstream log(read_text_file(dir / "metrics.log"));
    int64_t last_step = 0;
    std::string last_epoch = "0";
    for (std::string line; std::getline(log, line);) {
      if (line.empty()) continue;
      const json rec = json::parse(line);
      const int64_t step = rec.at("step").get<int64_t>();
      const std::string epoch = hp::kv::format_real(rec.at("epoch").get<double>());
      last_step = step;
      last_epoch = epoch;
      auto row = [&](const char* series, const char* key) {
        if (!rec.contains(key)) return;
        csv << "metrics," << step << "," << epoch << "," << series << ","
            << hp::kv::format_real(rec.at(key).get<double>()) << "\n";
      };
      row("task_loss", "task_loss");
      row("reg_loss", "reg_loss");
      row("expected_sparsity", "s_hat");
      row("scheduled_target", "t_now");
      row("lambda1", "lambda1");
      row("lambda2", "lambda2");
      row("lr", "lr");
      row("eer", "eer");
      row("min_dcf", "min_dcf");
      row("accuracy", "accuracy");
    }

    if (fs::exists(dir / "retention.csv")) {
      std::istringstream ret(read_text_file(dir / "retention.csv"));
      std::string header;
      std::getline(ret, header);
      HP_CHECK(header == "layer,kind,kept,total,fraction",
               "unrecognized retention header '" << header << "'");
      for (std::string line; std::getline(ret, line);) {
        if (line.empty()) continue;
        std::istringstream cells(line);
        std::string layer, kind, kept, total, fraction;
        std::getline(cells, layer, ',');
        std::getline(cells, kind, ',');
        std::getline(cells, kept, ',');
        std::getline(cells, total, ',');
        std::getline(cells, fraction, ',');
        csv << "retention," << last_step << "," << last_epoch << "," << kind << layer
            << ".kept," << kept << "\n";
        csv << "retention," << last_step << "," << last_epoch << "," << kind << layer
            << ".fraction," << fraction << "\n";
      }
    }
    *out_csv = dup_string(csv.str());
    return HP_OK;
  });
}

hp_status hp_sweep(const char* config, const double* targets, size_t n_targets,
                   const uint64_t* seeds, size_t n_seeds, const char* out_dir, char** out_csv) {
  if (config == nullptr) return fail(HP_ERR_ARGUMENT, "config is null");
  if (targets == nullptr || n_targets == 0) return fail(HP_ERR_ARGUMENT, "no sweep targets");
  if (seeds == nullptr || n_seeds == 0) return fail(HP_ERR_ARGUMENT, "no sweep seeds");
  if (out_dir == nullptr || out_dir[0] == '\0') return fail(HP_ERR_ARGUMENT, "out_dir is empty");
  if (out_csv == nullptr) return fail(HP_ERR_ARGUMENT, "out_csv is null");
  hp::train::TrainConfig base;
  try {
    base = parse_config(config);
    for (size_t i = 0; i < n_targets; ++i)
      HP_CHECK(targets[i] >= 0.0 && targets[i] < 1.0,
               "target sparsity must lie in [0, 1), got " << hp::kv::format_real(targets[i]));
  } catch (const std::exception& e) {
    return fail(HP_ERR_ARGUMENT, e.what());
  }
  return guarded(HP_ERR_FAILED, [&] {
    struct Row {
      double target = 0;
      uint64_t seed = 0;
      double realized_sparsity = 0;
      int64_t realized_params = 0;
      int64_t realized_flops = 0;
      std::optional<double> eer, min_dcf, accuracy;
    };
    std::vector<Row> rows;
    for (size_t ti = 0; ti < n_targets; ++ti) {
      for (size_t si = 0; si < n_seeds; ++si) {
        hp::train::TrainConfig cfg = base;
        cfg.target_sparsity = targets[ti];
        cfg.seed = seeds[si];
        cfg.out_dir = (fs::path(out_dir) / ("t" + hp::kv::format_real(targets[ti]) + "_s" +
                                            std::to_string(seeds[si])))
                          .string();
        cfg.validate();
        hp::train::Session session(cfg);
        session.fit();
        const Finalized f = finalize_model(session.net(), targets[ti]);
        HP_CHECK(f.rep.pass, "compacted model diverges from the gated reference in run '"
                                 << cfg.out_dir << "' (max abs diff "
                                 << hp::kv::format_real(f.rep.max_abs_diff) << ")");
        write_finalized(cfg.out_dir, f, session.net(), session.snapshot());
        const hp::train::EvalResult ev = hp::train::evaluate_model(*f.cm, cfg);
        Row r;
        r.target = targets[ti];
        r.seed = seeds[si];
        r.realized_sparsity = f.plan.realized_sparsity;
        r.realized_params = f.plan.realized_params;
        r.realized_flops = f.plan.realized_flops;
        r.eer = ev.eer;
        r.min_dcf = ev.min_dcf;
        r.accuracy = ev.accuracy;
        rows.push_back(r);
      }
    }

    // per-target medians over seeds, kept on every row of that target
    struct Med {
      std::optional<double> eer, min_dcf, accuracy;
    };
    std::vector<Med> med(n_targets);
    for (size_t ti = 0; ti < n_targets; ++ti) {
      std::vector<double> e, d, a;
      for (const Row& r : rows)
        if (r.target == targets[ti]) {
          if (r.eer) e.push_back(*r.eer);
          if (r.min_dcf) d.push_back(*r.min_dcf);
          if (r.accuracy) a.push_back(*r.accuracy);
        }
      if (!e.empty()) med[ti].eer = median_of(e);
      if (!d.empty()) med[ti].min_dcf = median_of(d);
      if (!a.empty()) med[ti].accuracy = median_of(a);
    }

    std::ostringstream csv;
    csv << "target,seed,realized_sparsity,remaining_params,flops,eer,min_dcf,accuracy,"
           "median_eer,median_min_dcf,median_accuracy\n";
    for (size_t ti = 0; ti < n_targets; ++ti)
      for (const Row& r : rows) {
        if (r.target != targets[ti]) continue;
        csv << hp::kv::format_real(r.target) << "," << r.seed << ","
            << hp::kv::format_real(r.realized_sparsity) << "," << r.realized_params << ","
            << r.realized_flops << "," << csv_cell(r.eer) << "," << csv_cell(r.min_dcf) << ","
            << csv_cell(r.accuracy) << "," << csv_cell(med[ti].eer) << ","
            << csv_cell(med[ti].min_dcf) << "," << csv_cell(med[ti].accuracy) << "\n";
      }

    std::ostringstream medians;
    medians << "target,median_eer,median_min_dcf,median_accuracy\n";
    for (size_t ti = 0; ti < n_targets; ++ti)
      medians << hp::kv::format_real(targets[ti]) << "," << csv_cell(med[ti].eer) << ","
              << csv_cell(med[ti].min_dcf) << "," << csv_cell(med[ti].accuracy) << "\n";

    fs::create_directories(out_dir);
    write_text_file(fs::path(out_dir) / "sweep.csv", csv.str());
    write_text_file(fs::path(out_dir) / "sweep_medians.csv", medians.str());
    *out_csv = dup_string(csv.str());
    return HP_OK;
  });
}

hp_status hp_selftest(char** out_report) {
  if (out_report == nullptr) return fail(HP_ERR_ARGUMENT, "out_report is null");
  return guarded(HP_ERR_FAILED, [&] {
    std::ostringstream rep;
    bool ok = true;
    auto line = [&](bool pass, const std::string& text) {
      rep << (pass ? "ok " : "FAIL ") << text << "\n";
      if (!pass && ok) {
        ok = false;
        g_err = text;
      }
    };

    // 1. end-to-end gradients of the tiny gated model, sampled coordinates
    {
      hp::model::Model m(selftest_arch(), 3, /*gated=*/true);
      hp::Tensor x = hp::Tensor::empty({2, 6, 4});
      for (int64_t i = 0; i < x.numel(); ++i)
        x.set_value_at(i, hp::rng::gaussian(11, hp::rng::kMonteCarlo, 0, uint64_t(i)));
      auto loss_fn = [&] {
        const hp::model::Model::Output out = m.forward_train(x, /*seed=*/17, /*step=*/5);
        return hp::ops::mean_all(hp::ops::mul(out.embedding, out.embedding));
      };
      std::vector<hp::Tensor> leaves;
      for (const hp::model::NamedParam& p : m.params()) leaves.push_back(p.t);
      for (const hp::Tensor& t : m.fabric().gate_tensors()) leaves.push_back(t);
      const FdCheck r = fd_check(loss_fn, leaves, /*per_leaf=*/1, /*seed=*/29);
      std::ostringstream s;
      s << "gradients: " << r.checked << " coordinates, max rel err "
        << hp::kv::format_real(r.max_rel_err) << " (bound 0.0001)";
      line(r.max_rel_err < 1e-4, s.str());
    }

    // 2. gate statistics: analytic vs Monte Carlo, 3 standard errors
    {
      const int64_t n = 100000;
      double worst = 0.0;
      bool pass = true;
      const double alphas[] = {-3.0, -1.0, 0.0, 1.0, 3.0};
      for (size_t li = 0; li < 5; ++li) {
        const double la = alphas[li];
        double sum_z = 0.0, sum_z2 = 0.0;
        int64_t nonzero = 0;
        for (int64_t j = 0; j < n; ++j) {
          const double u = hp::rng::uniform_open(77, hp::rng::kMonteCarlo, li, uint64_t(j));
          const double z = hp::hc::sample_z(la, u).z;
          sum_z += z;
          sum_z2 += z * z;
          if (z != 0.0) ++nonzero;
        }
        const double mean = sum_z / double(n);
        const double se_mean =
            std::sqrt(std::max(sum_z2 / double(n) - mean * mean, 0.0) / double(n));
        const double p = hp::hc::prob_nonzero(la);
        const double se_p = std::sqrt(p * (1.0 - p) / double(n));
        const double dz = std::fabs(mean - hp::hc::expected_z(la));
        const double dp = std::fabs(double(nonzero) / double(n) - p);
        worst = std::max({worst, dz / std::max(se_mean, 1e-12), dp / std::max(se_p, 1e-12)});
        if (dz > 3.0 * se_mean || dp > 3.0 * se_p) pass = false;
      }
      std::ostringstream s;
      s << "gate statistics: 5 logits x " << n << " draws, worst deviation "
        << hp::kv::format_real(worst) << " standard errors (bound 3)";
      line(pass, s.str());
    }

    // 3. compaction equivalence on random plans over the standard small model
    {
      hp::model::Model m(hp::model::small_arch(24, hp::model::HeadKind::kAam, 64, 50), 5,
                         /*gated=*/true);
      const auto& banks = m.fabric().banks();
      bool pass = true;
      double worst = 0.0;
      for (uint64_t p = 0; p < 8 && pass; ++p) {
        const double p_keep =
            0.15 + 0.7 * hp::rng::uniform_open(99, hp::rng::kPlanSample, p, 9999, 0);
        hp::compact::KeepMask keep(banks.size());
        for (size_t bi = 0; bi < banks.size(); ++bi) {
          keep[bi].resize(size_t(banks[bi].gates()));
          for (size_t j = 0; j < keep[bi].size(); ++j)
            keep[bi][j] = hp::rng::uniform_open(99, hp::rng::kPlanSample, p, uint64_t(bi),
                                                uint64_t(j)) < p_keep
                              ? 1
                              : 0;
        }
        const hp::compact::CompactionPlan plan = hp::compact::make_plan(m, keep, 50);
        const hp::model::Model cm = hp::compact::compact(m, plan);
        if (cm.count_params() != plan.realized_params) pass = false;
        const hp::compact::EquivalenceReport r =
            hp::compact::verify_equivalence(m, keep, cm, 2, 3000 + p);
        worst = std::max(worst, r.max_abs_diff);
        if (!r.pass) pass = false;
      }
      std::ostringstream s;
      s << "compaction: 8 random plans, exact parameter counts, max abs output diff "
        << hp::kv::format_real(worst) << " (bound 1e-09)";
      line(pass, s.str());
    }

    *out_report = dup_string(rep.str());
    return ok ? HP_OK : HP_ERR_FAILED;
  });
}

}  // extern "C"
