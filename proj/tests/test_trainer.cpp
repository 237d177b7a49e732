#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "checkpoint.hpp"
#include "doctest.h"
#include "kvconfig.hpp"
#include "objectives.hpp"
#include "ops.hpp"
#include "sparsity_controller.hpp"
#include "trainer.hpp"

using namespace hp;
namespace fs = std::filesystem;

namespace {

train::TrainConfig small_cfg(uint64_t seed = 7) {
  train::TrainConfig c;
  c.task = "toy_sv";
  c.preset = "sv_small_data";
  c.epochs = 1;
  c.seed = seed;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

struct TmpDir {
  fs::path path;
  explicit TmpDir(const char* tag) : path(fs::temp_directory_path() / tag) {
    fs::remove_all(path);
  }
  ~TmpDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("kv text parses, renders, and rejects malformed lines") {
  const kv::Items items = kv::parse("a = 1\n# comment\n\n b=two words \nc = 3 # trailing\n");
  REQUIRE(items.size() == 3);
  CHECK(items[0] == std::pair<std::string, std::string>{"a", "1"});
  CHECK(items[1] == std::pair<std::string, std::string>{"b", "two words"});
  CHECK(items[2] == std::pair<std::string, std::string>{"c", "3"});
  CHECK(kv::render(items) == "a = 1\nb = two words\nc = 3\n");
  CHECK(kv::parse(kv::render(items)) == items);

  CHECK_THROWS_WITH_AS(kv::parse("novalue\n"), doctest::Contains("no '='"), Error);
  CHECK_THROWS_WITH_AS(kv::parse("a=1\na=2\n"), doctest::Contains("duplicate config key 'a'"),
                       Error);
  CHECK_THROWS_WITH_AS(kv::parse("=5\n"), doctest::Contains("empty key"), Error);
  CHECK(kv::split_pair("k=v").first == "k");
  CHECK(kv::split_pair("k = v v").second == "v v");
  CHECK_THROWS_WITH_AS(kv::split_pair("nope"), doctest::Contains("key=value"), Error);
}

TEST_CASE("kv typed accessors name the offending key") {
  CHECK(kv::to_int("epochs", "-3") == -3);
  CHECK(kv::to_uint("seed", "18446744073709551615") == 18446744073709551615ull);
  CHECK(kv::to_real("t", "0.25") == 0.25);
  CHECK_THROWS_WITH_AS(kv::to_int("epochs", "3.5"), doctest::Contains("'epochs'"), Error);
  CHECK_THROWS_WITH_AS(kv::to_uint("seed", "-1"), doctest::Contains("'seed'"), Error);
  CHECK_THROWS_WITH_AS(kv::to_real("lr_weights", "fast"), doctest::Contains("'lr_weights'"),
                       Error);
}

TEST_CASE("format_real round-trips doubles through text") {
  for (double v : {1.0 / 3.0, 0.1, 5.0, 0.0, -2.5e-17, 1e300, 0.3333333333333333,
                   6.103515625e-05}) {
    CHECK(std::strtod(kv::format_real(v).c_str(), nullptr) == v);
  }
  CHECK(kv::format_real(0.5) == "0.5");
  CHECK(kv::format_real(192.0) == "192");
}

TEST_CASE("train config round-trips through kv text and rejects unknown keys") {
  train::TrainConfig c = small_cfg(123);
  c.target_sparsity = 0.35;
  c.lr_gates = 0.02;
  c.out_dir = "runs/x";
  const train::TrainConfig back = train::config_from_kv(kv::parse(kv::render(config_to_kv(c))));
  CHECK(back.task == c.task);
  CHECK(back.preset == c.preset);
  CHECK(back.target_sparsity == c.target_sparsity);
  CHECK(back.epochs == c.epochs);
  CHECK(back.batch_size == c.batch_size);
  CHECK(back.lr_weights == c.lr_weights);
  CHECK(back.lr_gates == c.lr_gates);
  CHECK(back.lr_multipliers == c.lr_multipliers);
  CHECK(back.weight_decay == c.weight_decay);
  CHECK(back.clip_norm == c.clip_norm);
  CHECK(back.warmup_epochs == c.warmup_epochs);
  CHECK(back.seed == c.seed);
  CHECK(back.eval_every == c.eval_every);
  CHECK(back.checkpoint_every == c.checkpoint_every);
  CHECK(back.out_dir == c.out_dir);

  train::TrainConfig d;
  CHECK_THROWS_WITH_AS(train::apply_kv(d, "learning_rate", "0.1"),
                       doctest::Contains("unknown config key 'learning_rate'"), Error);
  train::apply_kv(d, "target_sparsity", "0.7");
  CHECK(d.target_sparsity == 0.7);
}

TEST_CASE("train config validation enforces ranges and task/preset pairing") {
  train::TrainConfig c = small_cfg();
  CHECK_NOTHROW(c.validate());
  c.task = "imagenet";
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("unknown task"), Error);
  c = small_cfg();
  c.preset = "spoof_default";
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("does not apply"), Error);
  c = small_cfg();
  c.task = "toy_spoof";
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("does not apply"), Error);
  c = small_cfg();
  c.target_sparsity = 1.0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("target_sparsity"), Error);
  c = small_cfg();
  c.lr_gates = 0.0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("learning rates"), Error);
  c = small_cfg();
  c.epochs = 0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("epochs"), Error);
}

TEST_CASE("step records serialize with fixed key order") {
  train::StepRecord r;
  r.step = 3;
  r.epoch = 0.25;
  r.task_loss = 1.5;
  r.reg_loss = -0.125;
  r.s_hat = 0.5;
  r.t_now = 0.1;
  r.lambda1 = 0.01;
  r.lambda2 = 0.0;
  r.lr = 0.001;
  CHECK(r.to_json() ==
        "{\"step\":3,\"epoch\":0.25,\"task_loss\":1.5,\"reg_loss\":-0.125,\"s_hat\":0.5,"
        "\"t_now\":0.1,\"lambda1\":0.01,\"lambda2\":0,\"lr\":0.001}");
  r.eer = 1.0 / 3.0;
  r.min_dcf = 0.5;
  CHECK(r.to_json().find("\"eer\":0.3333333333333333,\"min_dcf\":0.5}") != std::string::npos);
}

TEST_CASE("checkpoint blobs survive a serialize/deserialize round trip bit-exactly") {
  train::TrainConfig cfg = small_cfg(17);
  train::Session s(cfg);
  for (int i = 0; i < 3; ++i) s.train_step();
  const ckpt::Checkpoint a = s.snapshot();
  const std::vector<uint8_t> bytes = ckpt::serialize(a);
  const ckpt::Checkpoint b = ckpt::deserialize(bytes);

  CHECK(b.compacted == a.compacted);
  CHECK(b.step == 3);
  CHECK(b.config_text == a.config_text);
  CHECK(b.arch.d_model == a.arch.d_model);
  CHECK(b.arch.conv.size() == a.arch.conv.size());
  CHECK(b.arch.blocks.size() == a.arch.blocks.size());
  REQUIRE(b.params.size() == a.params.size());
  for (size_t i = 0; i < a.params.size(); ++i) {
    CHECK(b.params[i].name == a.params[i].name);
    CHECK(b.params[i].data == a.params[i].data);  // bit-exact
  }
  REQUIRE(b.log_alphas.size() == a.log_alphas.size());
  for (size_t i = 0; i < a.log_alphas.size(); ++i)
    CHECK(b.log_alphas[i].data == a.log_alphas[i].data);
  CHECK(b.lambda1 == a.lambda1);
  CHECK(b.lambda2 == a.lambda2);
  CHECK(b.opt_steps == a.opt_steps);
  REQUIRE(b.opt_groups.size() == a.opt_groups.size());
  for (size_t g = 0; g < a.opt_groups.size(); ++g) {
    REQUIRE(b.opt_groups[g].slots.size() == a.opt_groups[g].slots.size());
    for (size_t i = 0; i < a.opt_groups[g].slots.size(); ++i) {
      CHECK(b.opt_groups[g].slots[i].m == a.opt_groups[g].slots[i].m);
      CHECK(b.opt_groups[g].slots[i].v == a.opt_groups[g].slots[i].v);
    }
  }

  // Serialization is itself deterministic.
  CHECK(ckpt::serialize(b) == bytes);

  TmpDir tmp("hp_ckpt_roundtrip");
  fs::create_directories(tmp.path);
  const std::string p = (tmp.path / "x.ckpt").string();
  ckpt::save(p, a);
  const ckpt::Checkpoint c = ckpt::load(p);
  CHECK(ckpt::serialize(c) == bytes);
}

TEST_CASE("checkpoint reader rejects corrupt files") {
  train::TrainConfig cfg = small_cfg(3);
  cfg.task = "toy_spoof";
  cfg.preset = "spoof_default";
  train::Session s(cfg);
  std::vector<uint8_t> bytes = ckpt::serialize(s.snapshot());

  std::vector<uint8_t> bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_WITH_AS(ckpt::deserialize(bad), doctest::Contains("bad magic"), Error);

  bad = bytes;
  bad[4] = 99;  // version field
  CHECK_THROWS_WITH_AS(ckpt::deserialize(bad), doctest::Contains("version"), Error);

  bad = bytes;
  bad.resize(bytes.size() / 2);
  CHECK_THROWS(ckpt::deserialize(bad));

  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_WITH_AS(ckpt::deserialize(bad), doctest::Contains("trailing"), Error);

  CHECK_THROWS_WITH_AS(ckpt::load("/nonexistent/dir/x.ckpt"), doctest::Contains("cannot open"),
                       Error);
}

TEST_CASE("mid-epoch resume continues bit-identically") {
  train::TrainConfig cfg = small_cfg(21);
  cfg.target_sparsity = 0.4;

  train::Session full(cfg);
  std::vector<std::string> want;
  for (int i = 0; i < 10; ++i) want.push_back(full.train_step().to_json());

  train::Session half(cfg);
  for (int i = 0; i < 4; ++i) CHECK(half.train_step().to_json() == want[size_t(i)]);
  const std::vector<uint8_t> bytes = ckpt::serialize(half.snapshot());

  train::Session resumed(ckpt::deserialize(bytes));
  CHECK(resumed.step() == 4);
  for (int i = 4; i < 10; ++i) CHECK(resumed.train_step().to_json() == want[size_t(i)]);

  // Post-continuation state, not just logs: parameters agree bit-for-bit.
  CHECK(resumed.net().param("head.w").to_vector() == full.net().param("head.w").to_vector());
  CHECK(resumed.net().param("block0.attn.wq").to_vector() ==
        full.net().param("block0.attn.wq").to_vector());
  CHECK(resumed.net().fabric().banks()[0].log_alpha.to_vector() ==
        full.net().fabric().banks()[0].log_alpha.to_vector());
  CHECK(resumed.controller().lambda1 == full.controller().lambda1);
  CHECK(resumed.controller().lambda2 == full.controller().lambda2);
}

TEST_CASE("fit writes a run directory and is bit-deterministic") {
  TmpDir ta("hp_fit_a"), tb("hp_fit_b");
  train::TrainConfig cfg = small_cfg(5);
  cfg.target_sparsity = 0.3;
  cfg.eval_every = 32;
  cfg.checkpoint_every = 40;
  cfg.out_dir = ta.path.string();

  // Identical config twice (out_dir included — it is part of the config), the
  // first run's directory moved aside between runs.
  train::FitResult ra = train::Session(cfg).fit();
  fs::rename(ta.path, tb.path);
  train::FitResult rb = train::Session(cfg).fit();
  std::swap(ta.path, tb.path);  // ta now names the first run's moved directory

  REQUIRE(ra.records.size() == 64);  // 2048 / 32 batches, 1 epoch
  CHECK(ra.records.front().step == 0);
  CHECK(ra.records.front().t_now == 0.0);  // ramp starts at zero
  CHECK(ra.records.back().step == 63);
  CHECK(ra.records.back().eer.has_value());      // final step always evaluates
  CHECK(ra.records.back().min_dcf.has_value());
  CHECK(ra.records[31].eer.has_value());         // eval_every = 32
  CHECK_FALSE(ra.records[30].eer.has_value());
  CHECK(ra.final_eval.eer.has_value());
  CHECK_FALSE(ra.final_eval.accuracy.has_value());

  CHECK(slurp(ta.path / "metrics.log") == slurp(tb.path / "metrics.log"));
  CHECK(slurp(ta.path / "final.ckpt") == slurp(tb.path / "final.ckpt"));
  CHECK(slurp(ta.path / "config.kv") == slurp(tb.path / "config.kv"));
  CHECK(fs::exists(ta.path / "checkpoints" / "step_40.ckpt"));

  // The log is exactly the records, one JSON object per line.
  std::string expect;
  for (const auto& r : ra.records) expect += r.to_json() + "\n";
  CHECK(slurp(ta.path / "metrics.log") == expect);

  // A third run with another seed diverges (the determinism is not vacuous).
  train::TrainConfig other = cfg;
  other.seed = 6;
  other.out_dir.clear();
  other.checkpoint_every = 0;
  other.eval_every = 0;
  train::FitResult rc = train::Session(other).fit();
  CHECK(rc.records.front().task_loss != ra.records.front().task_loss);
}

TEST_CASE("zero target keeps expected sparsity near zero (plain fine-tuning)") {
  train::TrainConfig cfg = small_cfg(11);
  cfg.target_sparsity = 0.0;
  train::Session s(cfg);
  for (int i = 0; i < 24; ++i) s.train_step();
  NoGradGuard ng;
  CHECK(s.net().fabric().expected_sparsity_value() < 0.05);
}

TEST_CASE("zero learning rates change nothing but still emit metrics") {
  train::TrainConfig cfg = small_cfg(13);
  cfg.task = "toy_spoof";
  cfg.preset = "spoof_default";
  train::Session s(cfg);
  for (auto& g : s.optimizer().groups()) g.cfg.lr = 0.0;
  s.controller().multiplier_lr = 0.0;  // post-construction: the config surface forbids 0

  const std::vector<double> w_before = s.net().param("head.w").to_vector();
  const std::vector<double> la_before = s.net().fabric().banks()[2].log_alpha.to_vector();
  const train::StepRecord rec = s.train_step();

  CHECK(s.net().param("head.w").to_vector() == w_before);
  CHECK(s.net().fabric().banks()[2].log_alpha.to_vector() == la_before);
  CHECK(s.controller().lambda1 == 0.0);
  CHECK(s.controller().lambda2 == 0.0);
  CHECK(std::isfinite(rec.task_loss));
  CHECK(rec.task_loss > 0.0);
  CHECK(rec.s_hat > 0.0);
  CHECK(rec.to_json().find("\"task_loss\":") != std::string::npos);
}

TEST_CASE("gate logits receive gradient from both the task loss and the penalty") {
  train::TrainConfig cfg = small_cfg(29);
  cfg.target_sparsity = 0.5;
  train::Session s(cfg);
  // Nudge the logits toward the stochastic region so some sampled gates are
  // interior (strictly between 0 and 1) and the task loss can reach them.
  for (Tensor& t : s.net().fabric().gate_tensors())
    for (int64_t i = 0; i < t.numel(); ++i) t.set_value_at(i, 0.5);

  Tensor x;
  std::vector<int64_t> labels;
  s.batch_for_step(0, x, labels);

  auto gate_grad_l1 = [&]() {
    double g = 0;
    for (const Tensor& t : s.net().fabric().gate_tensors())
      if (!t.impl()->grad.empty())
        for (double v : t.grad_to_vector()) g += std::fabs(v);
    return g;
  };

  // Source 1: task loss alone (no penalty in the graph).
  Tape::instance().clear();
  for (Tensor& t : s.net().fabric().gate_tensors()) t.zero_grad();
  auto out = s.net().forward_train(x, cfg.seed, 0);
  backward(obj::aam_loss(out.embedding, labels, s.net().param("head.w")));
  const double from_task = gate_grad_l1();
  CHECK(from_task > 0.0);

  // Source 2: penalty alone (no data in the graph).
  Tape::instance().clear();
  for (Tensor& t : s.net().fabric().gate_tensors()) t.zero_grad();
  ctrl::ControllerState cs{0.1, 0.1, 0.5, 5.0, 0.02};
  backward(ctrl::regularizer(cs, s.net().fabric().expected_sparsity(), 0.25));
  const double from_penalty = gate_grad_l1();
  CHECK(from_penalty > 0.0);
  Tape::instance().clear();
}

TEST_CASE("non-finite loss aborts with a diagnostic dump") {
  train::TrainConfig cfg = small_cfg(31);
  train::Session s(cfg);
  Tensor w = s.net().param("head.w");
  w.set_value_at(0, std::numeric_limits<double>::quiet_NaN());
  CHECK_THROWS_WITH_AS(s.train_step(), doctest::Contains("non-finite task loss"), Error);
  try {
    s.train_step();
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("log_alpha min/mean/max") != std::string::npos);
    CHECK(msg.find("input min/mean/max") != std::string::npos);
    CHECK(msg.find("lambda1") != std::string::npos);
  }
  Tape::instance().clear();
}

TEST_CASE("batches are deterministic, cover the set, and reshuffle across epochs") {
  train::TrainConfig cfg = small_cfg(37);
  train::Session a(cfg), b(cfg);
  Tensor xa, xb;
  std::vector<int64_t> la, lb;
  a.batch_for_step(5, xa, la);
  b.batch_for_step(5, xb, lb);
  CHECK(la == lb);
  CHECK(xa.to_vector() == xb.to_vector());

  a.batch_for_step(5 + a.steps_per_epoch(), xb, lb);  // same slot, next epoch
  CHECK(xa.to_vector() != xb.to_vector());

  // One epoch of batches covers the whole split exactly once.
  int64_t rows = 0;
  for (int64_t st = 0; st < a.steps_per_epoch(); ++st) {
    a.batch_for_step(st, xa, la);
    rows += xa.shape()[0];
  }
  CHECK(rows == 2048);  // batch 32 x 64 steps = the whole small-data train split
}

TEST_CASE("spoof session trains and reports accuracy") {
  train::TrainConfig cfg = small_cfg(41);
  cfg.task = "toy_spoof";
  cfg.preset = "spoof_default";
  train::Session s(cfg);
  const train::StepRecord rec = s.train_step();
  CHECK(std::isfinite(rec.task_loss));
  const train::EvalResult ev = s.evaluate();
  REQUIRE(ev.accuracy.has_value());
  CHECK_FALSE(ev.eer.has_value());
  CHECK(*ev.accuracy >= 0.0);
  CHECK(*ev.accuracy <= 1.0);
}

TEST_CASE("resume rejects mismatched snapshots") {
  train::TrainConfig cfg = small_cfg(43);
  cfg.task = "toy_spoof";
  cfg.preset = "spoof_default";
  train::Session s(cfg);
  ckpt::Checkpoint snap = s.snapshot();
  snap.compacted = true;
  CHECK_THROWS_WITH_AS(train::Session{snap}, doctest::Contains("compacted"), Error);
  snap = s.snapshot();
  snap.params[0].data.pop_back();
  CHECK_THROWS_WITH_AS(train::Session{snap}, doctest::Contains("holds"), Error);
  snap = s.snapshot();
  std::swap(snap.log_alphas[0], snap.log_alphas[1]);
  CHECK_THROWS_WITH_AS(train::Session{snap}, doctest::Contains("bank order"), Error);
}
