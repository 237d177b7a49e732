// Command-line front end. Links only the public C interface; all engine work
// happens behind hybridprune.h.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "hybridprune.h"

namespace fs = std::filesystem;

namespace {

// Owned string from the library, freed on scope exit.
struct LibString {
  char* p = nullptr;
  ~LibString() { hp_string_free(p); }
  std::string str() const { return p == nullptr ? std::string() : std::string(p); }
};

int report_failure(hp_status st) {
  std::cerr << "status = error\ncode = " << int(st) << "\nmessage = " << hp_last_error() << "\n";
  return int(st);
}

std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// Ordered key=value document with last-wins updates, so command-line
// overrides can be layered onto a config file before the engine (which
// rejects duplicate keys) sees the text.
struct KvDoc {
  std::vector<std::pair<std::string, std::string>> items;

  void set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : items)
      if (k == key) {
        v = value;
        return;
      }
    items.push_back({key, value});
  }

  std::string render() const {
    std::string out;
    for (const auto& [k, v] : items) out += k + " = " + v + "\n";
    return out;
  }
};

KvDoc parse_loose(const std::string& text) {
  KvDoc doc;
  std::istringstream in(text);
  int lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw CLI::ValidationError("config line " + std::to_string(lineno) + " has no '=': \"" +
                                 line + "\"");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty())
      throw CLI::ValidationError("config line " + std::to_string(lineno) + " has an empty key");
    doc.set(key, trim(line.substr(eq + 1)));
  }
  return doc;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f.good()) throw CLI::ValidationError("cannot read '" + path + "'");
  std::ostringstream out;
  out << f.rdbuf();
  return out.str();
}

void apply_set_flags(KvDoc& doc, const std::vector<std::string>& sets) {
  for (const std::string& s : sets) {
    const size_t eq = s.find('=');
    if (eq == std::string::npos || trim(s.substr(0, eq)).empty())
      throw CLI::ValidationError("--set expects key=value, got \"" + s + "\"");
    doc.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
}

uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string short_hash(const std::string& s) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(s)));
  return std::string(buf, 12);
}

// Default output root when --out is absent: $HP_OUT_ROOT/<prefix>_<hash>.
// The hash is over the effective config, so identical invocations share a
// directory and distinct ones never collide.
std::string default_out(const char* prefix, const std::string& hashed_text) {
  const char* root = std::getenv("HP_OUT_ROOT");
  if (root == nullptr || root[0] == '\0') return {};
  return (fs::path(root) / (std::string(prefix) + "_" + short_hash(hashed_text))).string();
}

template <class T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::istringstream in(text);
  for (std::string cell; std::getline(in, cell, ',');) {
    cell = trim(cell);
    std::istringstream c(cell);
    T v;
    if (!(c >> v) || !(c >> std::ws).eof())
      throw CLI::ValidationError(std::string(what) + ": \"" + cell + "\" is not a number");
    out.push_back(v);
  }
  if (out.empty()) throw CLI::ValidationError(std::string(what) + ": empty list");
  return out;
}

struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<uint64_t> seed;
  std::string out;

  void attach(CLI::App& cmd) {
    cmd.add_option("--config", config_path, "config file of key = value lines");
    cmd.add_option("--set", sets, "override one config key, e.g. --set epochs=4")
        ->take_all()
        ->expected(-1);
    cmd.add_option("--seed", seed, "run seed (shorthand for --set seed=N)");
    cmd.add_option("--out", out, "output directory");
  }

  // Effective config text; `with_out` controls whether out_dir is resolved
  // (from --out, then $HP_OUT_ROOT) and written into the text.
  std::string resolve(const char* prefix, bool with_out) const {
    KvDoc doc;
    if (!config_path.empty()) {
      doc = parse_loose(slurp(config_path));
    } else {
      LibString defaults;
      if (hp_default_config(&defaults.p) != HP_OK)
        throw CLI::ValidationError(hp_last_error());
      doc = parse_loose(defaults.str());
    }
    apply_set_flags(doc, sets);
    if (seed) doc.set("seed", std::to_string(*seed));
    if (with_out) {
      std::string dir = out;
      if (dir.empty()) dir = default_out(prefix, doc.render());
      if (!dir.empty()) doc.set("out_dir", dir);
    }
    return doc.render();
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hybrid pruning: joint training and structured compression of a small "
               "transformer encoder"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(hp_version()));

  // train
  auto* train = app.add_subcommand("train", "run one training job");
  ConfigFlags train_flags;
  train_flags.attach(*train);

  // finalize
  auto* finalize = app.add_subcommand("finalize", "binarize gates and emit a compact model");
  std::string fin_ckpt, fin_out;
  double fin_target = 0.5;
  finalize->add_option("--checkpoint", fin_ckpt, "trained gated checkpoint")->required();
  finalize->add_option("--target", fin_target, "sparsity target in [0, 1)")
      ->capture_default_str();
  finalize->add_option("--out", fin_out, "output directory (default: alongside the checkpoint)");

  // eval
  auto* eval = app.add_subcommand("eval", "held-out metrics for a checkpoint");
  std::string eval_ckpt;
  std::vector<std::string> eval_sets;
  std::optional<uint64_t> eval_seed;
  eval->add_option("--checkpoint", eval_ckpt, "gated or finalized checkpoint")->required();
  eval->add_option("--set", eval_sets, "override a stored config key, e.g. --set seed=9")
      ->take_all()
      ->expected(-1);
  eval->add_option("--seed", eval_seed, "evaluate under a different data seed");

  // report
  auto* report = app.add_subcommand("report", "summarize a run directory into one table");
  std::string report_dir;
  report->add_option("--run", report_dir, "run directory holding metrics.log")->required();

  // sweep
  auto* sweep = app.add_subcommand("sweep", "train/finalize/eval a grid of targets and seeds");
  ConfigFlags sweep_flags;
  sweep_flags.attach(*sweep);
  std::string sweep_targets = "0,0.1,0.3,0.5";
  std::string sweep_seeds = "1,2,3";
  sweep->add_option("--targets", sweep_targets, "comma-separated sparsity targets")
      ->capture_default_str();
  sweep->add_option("--seeds", sweep_seeds, "comma-separated run seeds")->capture_default_str();

  // selftest
  auto* selftest = app.add_subcommand("selftest", "run the built-in property checks");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      const std::string cfg = train_flags.resolve("train", /*with_out=*/true);
      LibString summary;
      const hp_status st = hp_train(cfg.c_str(), &summary.p);
      if (st != HP_OK) return report_failure(st);
      std::cout << summary.str();
      return 0;
    }

    if (finalize->parsed()) {
      hp_model* m = nullptr;
      hp_status st = hp_model_open(fin_ckpt.c_str(), &m);
      if (st != HP_OK) return report_failure(st);
      const std::string out =
          fin_out.empty() ? fs::path(fin_ckpt).parent_path().string() : fin_out;
      LibString summary;
      st = hp_model_finalize(m, fin_target, out.empty() ? "." : out.c_str(), &summary.p);
      hp_model_close(m);
      if (st != HP_OK) return report_failure(st);
      std::cout << summary.str();
      return 0;
    }

    if (eval->parsed()) {
      hp_model* m = nullptr;
      hp_status st = hp_model_open(eval_ckpt.c_str(), &m);
      if (st != HP_OK) return report_failure(st);
      KvDoc overrides;
      apply_set_flags(overrides, eval_sets);
      if (eval_seed) overrides.set("seed", std::to_string(*eval_seed));
      const std::string ov = overrides.render();
      LibString metrics;
      st = hp_model_eval(m, ov.empty() ? nullptr : ov.c_str(), &metrics.p);
      hp_model_close(m);
      if (st != HP_OK) return report_failure(st);
      std::cout << metrics.str();
      return 0;
    }

    if (report->parsed()) {
      LibString csv;
      const hp_status st = hp_report(report_dir.c_str(), &csv.p);
      if (st != HP_OK) return report_failure(st);
      std::ofstream f(fs::path(report_dir) / "summary.csv", std::ios::binary | std::ios::trunc);
      f << csv.str();
      f.close();
      if (!f.good()) {
        std::cerr << "status = error\ncode = 3\nmessage = cannot write summary.csv under '"
                  << report_dir << "'\n";
        return 3;
      }
      std::cout << csv.str();
      return 0;
    }

    if (sweep->parsed()) {
      const std::vector<double> targets = parse_list<double>(sweep_targets, "--targets");
      const std::vector<uint64_t> seeds = parse_list<uint64_t>(sweep_seeds, "--seeds");
      const std::string cfg = sweep_flags.resolve("sweep", /*with_out=*/false);
      std::string out = sweep_flags.out;
      if (out.empty()) out = default_out("sweep", cfg + sweep_targets + sweep_seeds);
      if (out.empty())
        throw CLI::ValidationError("sweep needs --out (or HP_OUT_ROOT) for its run directories");
      LibString csv;
      const hp_status st = hp_sweep(cfg.c_str(), targets.data(), targets.size(), seeds.data(),
                                    seeds.size(), out.c_str(), &csv.p);
      if (st != HP_OK) return report_failure(st);
      std::cout << csv.str();
      return 0;
    }

    if (selftest->parsed()) {
      LibString rep;
      const hp_status st = hp_selftest(&rep.p);
      std::cout << rep.str();
      if (st != HP_OK) return report_failure(st);
      return 0;
    }
  } catch (const CLI::Error& e) {
    return app.exit(e);
  }
  return 0;
}
