#include "metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "common.hpp"

namespace hp::metrics {
namespace {

struct OpPoint {
  double far;  // nonincreasing as the threshold rises
  double frr;  // nondecreasing
};

void check_scores(const TrialScores& s) {
  HP_CHECK(!s.target.empty(), "scores need at least one target trial");
  HP_CHECK(!s.nontarget.empty(), "scores need at least one nontarget trial");
  for (double v : s.target) HP_CHECK(std::isfinite(v), "non-finite target score " << v);
  for (double v : s.nontarget) HP_CHECK(std::isfinite(v), "non-finite nontarget score " << v);
}

// One ROC point per distinct score value (threshold rule: accept iff
// score >= theta), plus the reject-everything endpoint. far starts at 1 and
// falls; frr starts at 0 and rises, so frr-far is nondecreasing.
std::vector<OpPoint> operating_points(const TrialScores& s) {
  std::vector<double> tar = s.target, non = s.nontarget;
  std::sort(tar.begin(), tar.end());
  std::sort(non.begin(), non.end());

  std::vector<double> thr;
  thr.reserve(tar.size() + non.size() + 1);
  thr.insert(thr.end(), tar.begin(), tar.end());
  thr.insert(thr.end(), non.begin(), non.end());
  std::sort(thr.begin(), thr.end());
  thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
  thr.push_back(std::numeric_limits<double>::infinity());

  const double nt = double(tar.size());
  const double nn = double(non.size());
  std::vector<OpPoint> pts;
  pts.reserve(thr.size());
  for (double t : thr) {
    const auto accepted_non = non.end() - std::lower_bound(non.begin(), non.end(), t);
    const auto rejected_tar = std::lower_bound(tar.begin(), tar.end(), t) - tar.begin();
    pts.push_back({double(accepted_non) / nn, double(rejected_tar) / nt});
  }
  return pts;
}

}  // namespace

double eer(const TrialScores& s) {
  check_scores(s);
  const std::vector<OpPoint> pts = operating_points(s);
  for (size_t i = 0; i < pts.size(); ++i) {
    const double d = pts[i].frr - pts[i].far;
    if (d < 0) continue;
    if (d == 0) return 0.5 * (pts[i].far + pts[i].frr);
    // First sign change; the previous point exists (the lowest threshold
    // accepts everything: far=1, frr=0). Interpolate the crossing on the
    // segment between the two ROC points.
    const OpPoint& lo = pts[i - 1];
    const OpPoint& hi = pts[i];
    const double d0 = lo.frr - lo.far;  // < 0
    const double t = -d0 / (d - d0);
    const double far = lo.far + t * (hi.far - lo.far);
    const double frr = lo.frr + t * (hi.frr - lo.frr);
    return 0.5 * (far + frr);
  }
  HP_CHECK(false, "no ROC crossing found");  // unreachable: last point has frr=1, far=0
  return 0;
}

double min_dcf(const TrialScores& s, double p_target, double c_miss, double c_fa) {
  check_scores(s);
  HP_CHECK(p_target > 0 && p_target < 1, "p_target must lie in (0,1), got " << p_target);
  HP_CHECK(c_miss > 0 && c_fa > 0, "detection costs must be positive");
  double best = std::numeric_limits<double>::infinity();
  for (const OpPoint& p : operating_points(s))
    best = std::min(best, c_miss * p_target * p.frr + c_fa * (1.0 - p_target) * p.far);
  return best / std::min(c_miss * p_target, c_fa * (1.0 - p_target));
}

double accuracy(const std::vector<int64_t>& predicted, const std::vector<int64_t>& labels) {
  HP_CHECK(!labels.empty(), "accuracy needs at least one example");
  HP_CHECK(predicted.size() == labels.size(), "prediction/label count mismatch: "
                                                  << predicted.size() << " vs " << labels.size());
  int64_t hit = 0;
  for (size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return double(hit) / double(labels.size());
}

double cosine_score(const std::vector<double>& a, const std::vector<double>& b) {
  HP_CHECK(a.size() == b.size() && !a.empty(),
           "cosine needs equal-length nonempty vectors, got " << a.size() << " vs " << b.size());
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  HP_CHECK(na > 0 && nb > 0, "cosine undefined for a zero vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

TrialScores score_trials(const std::vector<std::vector<double>>& embeddings,
                         const std::vector<task::Trial>& trials) {
  HP_CHECK(!trials.empty(), "no trials to score");
  TrialScores out;
  for (const task::Trial& t : trials) {
    HP_CHECK(t.a >= 0 && size_t(t.a) < embeddings.size() && t.b >= 0 &&
                 size_t(t.b) < embeddings.size(),
             "trial references embedding out of range: (" << t.a << "," << t.b << ") of "
                                                          << embeddings.size());
    const double sc = cosine_score(embeddings[t.a], embeddings[t.b]);
    (t.target ? out.target : out.nontarget).push_back(sc);
  }
  return out;
}

RetentionPattern retention_pattern(const fabric::GateFabric& fabric,
                                   const std::vector<std::vector<uint8_t>>& keep) {
  const auto& banks = fabric.banks();
  HP_CHECK(keep.size() == banks.size(),
           "keep decisions cover " << keep.size() << " banks, fabric has " << banks.size());
  RetentionPattern out;
  out.reserve(banks.size());
  for (size_t i = 0; i < banks.size(); ++i) {
    const fabric::GateBank& b = banks[i];
    HP_CHECK(int64_t(keep[i].size()) == b.gates(), "bank " << b.name << " has " << b.gates()
                                                           << " gates, keep vector has "
                                                           << keep[i].size());
    RetentionRow r;
    r.layer = b.layer;
    r.kind = fabric::kind_name(b.kind);
    r.total = b.gates();
    for (uint8_t k : keep[i]) r.kept += k != 0;
    r.fraction = double(r.kept) / double(r.total);
    out.push_back(std::move(r));
  }
  return out;
}

std::string retention_csv(const RetentionPattern& p) {
  std::string out = "layer,kind,kept,total,fraction\n";
  char buf[64];
  for (const RetentionRow& r : p) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.fraction);
    out += std::to_string(r.layer) + "," + r.kind + "," + std::to_string(r.kept) + "," +
           std::to_string(r.total) + "," + buf + "\n";
  }
  return out;
}

double pattern_l1_distance(const RetentionPattern& a, const RetentionPattern& b) {
  HP_CHECK(a.size() == b.size(),
           "patterns differ in row count: " << a.size() << " vs " << b.size());
  double d = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    HP_CHECK(a[i].layer == b[i].layer && a[i].kind == b[i].kind && a[i].total == b[i].total,
             "pattern rows misaligned at index " << i << ": (" << a[i].layer << "," << a[i].kind
                                                 << "," << a[i].total << ") vs (" << b[i].layer
                                                 << "," << b[i].kind << "," << b[i].total << ")");
    d += std::abs(a[i].fraction - b[i].fraction);
  }
  return d;
}

}  // namespace hp::metrics
