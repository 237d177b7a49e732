#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gate_fabric.hpp"
#include "synth_tasks.hpp"

// Verification metrics and structure-retention reporting. Scoring is pure and
// count-based: operating points come from the distinct score values, so any
// strictly monotone rescoring leaves every metric bit-identical.

namespace hp::metrics {

struct TrialScores {
  std::vector<double> target;     // scores of same-class trials
  std::vector<double> nontarget;  // scores of cross-class trials
};

// Equal error rate in [0,1]. False-accept and false-reject rates are swept
// over all thresholds; when no operating point has them exactly equal, the
// crossing is linearly interpolated between the two adjacent ROC points.
double eer(const TrialScores& s);

// min over thresholds of (c_miss*p_target*FRR + c_fa*(1-p_target)*FAR),
// normalized by min(c_miss*p_target, c_fa*(1-p_target)).
double min_dcf(const TrialScores& s, double p_target = 0.05, double c_miss = 1.0,
               double c_fa = 1.0);

// Fraction of exact matches; both vectors same nonzero length.
double accuracy(const std::vector<int64_t>& predicted, const std::vector<int64_t>& labels);

// Cosine similarity of two equal-length vectors (L2-normalizing both).
double cosine_score(const std::vector<double>& a, const std::vector<double>& b);

// Scores every trial by cosine over the referenced embeddings and splits the
// results by trial type.
TrialScores score_trials(const std::vector<std::vector<double>>& embeddings,
                         const std::vector<task::Trial>& trials);

struct RetentionRow {
  int layer = 0;
  std::string kind;   // "conv" | "mhsa" | "ffn"
  int64_t kept = 0;
  int64_t total = 0;
  double fraction = 0.0;  // kept/total, exact
};

using RetentionPattern = std::vector<RetentionRow>;

// One row per gate bank; `keep` is one byte per gate, outer vector parallel
// to fabric.banks(). Pass all-ones for an untouched model.
RetentionPattern retention_pattern(const fabric::GateFabric& fabric,
                                   const std::vector<std::vector<uint8_t>>& keep);

// CSV with header "layer,kind,kept,total,fraction"; fractions round-trip.
std::string retention_csv(const RetentionPattern& p);

// Sum of |fraction_a - fraction_b| over aligned rows; patterns must have the
// same layers, kinds, and totals.
double pattern_l1_distance(const RetentionPattern& a, const RetentionPattern& b);

}  // namespace hp::metrics
