#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "gate_fabric.hpp"
#include "metrics.hpp"
#include "rng.hpp"
#include "synth_tasks.hpp"

using namespace hp;
using metrics::TrialScores;

namespace {

// Brute-force oracle, written first and kept dumb on purpose: every distinct
// score is tried as a threshold (accept iff score >= theta, plus one
// reject-all point above the maximum), error rates are counted by scanning
// the full trial lists, and the FA=FR crossing is solved on the bracketing
// segment. O(n^2), no shared code with the implementation.
struct SweepPoint {
  double far, frr;
};

std::vector<SweepPoint> oracle_sweep(const TrialScores& s) {
  std::vector<double> thr;
  for (double v : s.target) thr.push_back(v);
  for (double v : s.nontarget) thr.push_back(v);
  std::sort(thr.begin(), thr.end());
  thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
  thr.push_back(thr.back() + 1.0);

  std::vector<SweepPoint> pts;
  for (double t : thr) {
    int64_t fa = 0, fr = 0;
    for (double v : s.nontarget) fa += v >= t;
    for (double v : s.target) fr += v < t;
    pts.push_back({double(fa) / double(s.nontarget.size()), double(fr) / double(s.target.size())});
  }
  return pts;
}

double oracle_eer(const TrialScores& s) {
  const auto pts = oracle_sweep(s);
  for (size_t i = 0; i < pts.size(); ++i) {
    if (pts[i].frr < pts[i].far) continue;
    if (pts[i].frr == pts[i].far) return pts[i].frr;
    const auto& a = pts[i - 1];
    const auto& b = pts[i];
    // far_a + t (far_b - far_a) = frr_a + t (frr_b - frr_a)
    const double t = (a.far - a.frr) / ((a.far - a.frr) + (b.frr - b.far));
    return a.far + t * (b.far - a.far);
  }
  REQUIRE(false);
  return -1;
}

double oracle_min_dcf(const TrialScores& s, double p_t, double c_m, double c_f) {
  double best = 1e300;
  for (const SweepPoint& p : oracle_sweep(s))
    best = std::min(best, c_m * p_t * p.frr + c_f * (1.0 - p_t) * p.far);
  return best / std::min(c_m * p_t, c_f * (1.0 - p_t));
}

TrialScores random_scores(uint64_t set, bool quantized) {
  TrialScores s;
  const uint64_t nt = 1 + rng::uniform_index(400, 0xACE5, rng::kVerifyInputs, set, 1);
  const uint64_t nn = 1 + rng::uniform_index(400, 0xACE5, rng::kVerifyInputs, set, 2);
  for (uint64_t i = 0; i < nt; ++i) {
    double v = 6.0 * rng::uniform_open(0xACE5, rng::kVerifyInputs, set, 3, i) - 3.0;
    s.target.push_back(quantized ? std::round(v * 10.0) / 10.0 : v);
  }
  for (uint64_t i = 0; i < nn; ++i) {
    double v = 6.0 * rng::uniform_open(0xACE5, rng::kVerifyInputs, set, 4, i) - 3.0;
    s.nontarget.push_back(quantized ? std::round(v * 10.0) / 10.0 : v);
  }
  return s;
}

}  // namespace

TEST_CASE("eer hits the documented fixtures") {
  CHECK(metrics::eer({{0.9, 0.8}, {0.1, 0.2}}) == 0.0);
  CHECK(metrics::eer({{0.9, 0.8, 0.4}, {0.6, 0.2, 0.1}}) == 1.0 / 3.0);
  CHECK(metrics::eer({{0.1, 0.2}, {0.5, 0.6, 0.7}}) == 1.0);
}

TEST_CASE("eer interpolates between ROC points when rates never tie") {
  // 2 targets vs 3 nontargets put the two rates on different grids, so no
  // operating point has them equal. Sweep by hand: theta=2.0 gives
  // (far,frr)=(2/3,1/2), theta=2.5 gives (1/3,1/2); on that segment frr is
  // constant 1/2 and far crosses it halfway, so eer = 1/2.
  const double e = metrics::eer({{1.0, 3.0}, {0.0, 2.0, 2.5}});
  CHECK(e == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(e == doctest::Approx(oracle_eer({{1.0, 3.0}, {0.0, 2.0, 2.5}})).epsilon(1e-12));
}

TEST_CASE("min_dcf hits the documented fixtures") {
  CHECK(metrics::min_dcf({{0.9, 0.8}, {0.1, 0.2}}) == 0.0);
  CHECK(metrics::min_dcf({{0.5, 0.5}, {0.5}}) == 1.0);  // one forced operating point
  TrialScores s = random_scores(4242, false);
  s.target.resize(50);
  s.nontarget.resize(50);
  CHECK(metrics::min_dcf(s) ==
        doctest::Approx(oracle_min_dcf(s, 0.05, 1.0, 1.0)).epsilon(1e-12));
}

TEST_CASE("eer and min_dcf match the exhaustive sweep oracle on random sets") {
  for (uint64_t set = 0; set < 100; ++set) {
    const TrialScores s = random_scores(set, set % 2 == 1);  // odd sets have heavy ties
    const double e = metrics::eer(s);
    CHECK(e >= 0.0);
    CHECK(e <= 1.0);
    CHECK(std::abs(e - oracle_eer(s)) < 1e-9);
    CHECK(std::abs(metrics::min_dcf(s) - oracle_min_dcf(s, 0.05, 1.0, 1.0)) < 1e-9);
    if (set % 10 == 0) {
      CHECK(std::abs(metrics::min_dcf(s, 0.5, 2.0, 1.0) - oracle_min_dcf(s, 0.5, 2.0, 1.0)) <
            1e-9);
      CHECK(std::abs(metrics::min_dcf(s, 0.01, 1.0, 3.0) - oracle_min_dcf(s, 0.01, 1.0, 3.0)) <
            1e-9);
    }
  }
}

TEST_CASE("eer is exactly invariant under strictly monotone rescoring") {
  for (uint64_t set = 0; set < 8; ++set) {
    const TrialScores s = random_scores(set + 900, set % 2 == 1);
    const double base = metrics::eer(s);
    TrialScores halved = s, warped = s;
    for (auto& v : halved.target) v *= 0.5;
    for (auto& v : halved.nontarget) v *= 0.5;
    for (auto& v : warped.target) v = std::atan(v);
    for (auto& v : warped.nontarget) v = std::atan(v);
    CHECK(metrics::eer(halved) == base);
    CHECK(metrics::eer(warped) == base);
  }
}

TEST_CASE("score validation rejects empty classes and non-finite values") {
  CHECK_THROWS_WITH_AS(metrics::eer({{}, {0.1}}), doctest::Contains("target"), Error);
  CHECK_THROWS_WITH_AS(metrics::eer({{0.1}, {}}), doctest::Contains("nontarget"), Error);
  CHECK_THROWS_WITH_AS(metrics::min_dcf({{0.1}, {}}), doctest::Contains("nontarget"), Error);
  const double inf = std::numeric_limits<double>::infinity();
  CHECK_THROWS_WITH_AS(metrics::eer({{inf}, {0.0}}), doctest::Contains("non-finite"), Error);
  CHECK_THROWS_WITH_AS(metrics::min_dcf({{0.5}, {0.1}}, 0.0),
                       doctest::Contains("p_target"), Error);
}

TEST_CASE("accuracy counts exact matches") {
  CHECK(metrics::accuracy({1, 0, 1, 1}, {1, 1, 1, 0}) == 0.5);
  CHECK(metrics::accuracy({3, 3}, {3, 3}) == 1.0);
  CHECK(metrics::accuracy({0}, {5}) == 0.0);
  CHECK_THROWS_WITH_AS(metrics::accuracy({1}, {1, 0}), doctest::Contains("mismatch"), Error);
  CHECK_THROWS_WITH_AS(metrics::accuracy({}, {}), doctest::Contains("at least one"), Error);
}

TEST_CASE("cosine scoring is normalized and scale invariant") {
  CHECK(metrics::cosine_score({1, 0}, {0, 2}) == 0.0);
  CHECK(metrics::cosine_score({1, 2, 3}, {1, 2, 3}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(metrics::cosine_score({1, 0}, {-3, 0}) == doctest::Approx(-1.0).epsilon(1e-15));
  const std::vector<double> a{0.3, -1.2, 2.0}, b{1.1, 0.4, -0.7};
  std::vector<double> a4 = a;
  for (auto& v : a4) v *= 4.0;  // power-of-two scaling cancels bit-exactly
  CHECK(metrics::cosine_score(a4, b) == metrics::cosine_score(a, b));
  CHECK_THROWS_WITH_AS(metrics::cosine_score({0, 0}, {1, 0}), doctest::Contains("zero vector"),
                       Error);
  CHECK_THROWS_WITH_AS(metrics::cosine_score({1}, {1, 2}), doctest::Contains("equal-length"),
                       Error);
}

TEST_CASE("score_trials routes cosines by trial type") {
  const std::vector<std::vector<double>> emb{{1, 0}, {0, 1}, {1, 1}};
  const std::vector<task::Trial> trials{{0, 2, true}, {0, 1, false}, {1, 2, false}};
  const TrialScores s = metrics::score_trials(emb, trials);
  REQUIRE(s.target.size() == 1);
  REQUIRE(s.nontarget.size() == 2);
  CHECK(s.target[0] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK(s.nontarget[0] == 0.0);
  CHECK(s.nontarget[1] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK_THROWS_WITH_AS(metrics::score_trials(emb, {{0, 3, true}}),
                       doctest::Contains("out of range"), Error);
  CHECK_THROWS_WITH_AS(metrics::score_trials(emb, {}), doctest::Contains("no trials"), Error);
}

namespace {

fabric::GateFabric toy_fabric() {
  auto las = [](int64_t n) {
    return Tensor::from_vector({n}, std::vector<double>(n, 0.0), Dtype::F64, true);
  };
  std::vector<fabric::GateBank> banks;
  banks.push_back({"conv0", fabric::Kind::ConvChannel, 0, 2, las(3)});
  banks.push_back({"block0.heads", fabric::Kind::MhsaHead, 0, 5, las(4)});
  banks.push_back({"block0.ffn", fabric::Kind::FfnNeuron, 0, 3, las(6)});
  return fabric::GateFabric(std::move(banks), {}, 10, 10 + 2 * 3 + 5 * 4 + 3 * 6);
}

}  // namespace

TEST_CASE("retention pattern counts kept gates per bank") {
  const auto f = toy_fabric();
  const auto all = metrics::retention_pattern(f, {{1, 1, 1}, {1, 1, 1, 1}, {1, 1, 1, 1, 1, 1}});
  REQUIRE(all.size() == 3);
  for (const auto& r : all) CHECK(r.fraction == 1.0);

  const auto cut = metrics::retention_pattern(f, {{1, 1, 1}, {1, 0, 0, 1}, {1, 1, 1, 0, 0, 0}});
  CHECK(cut[0].kind == "conv");
  CHECK(cut[0].fraction == 1.0);
  CHECK(cut[1].layer == 0);
  CHECK(cut[1].kind == "mhsa");
  CHECK(cut[1].kept == 2);
  CHECK(cut[1].total == 4);
  CHECK(cut[1].fraction == 0.5);
  CHECK(cut[2].kind == "ffn");
  CHECK(cut[2].fraction == 0.5);
  for (const auto& r : cut) CHECK(r.fraction == double(r.kept) / double(r.total));

  CHECK_THROWS_WITH_AS(metrics::retention_pattern(f, {{1, 1, 1}}), doctest::Contains("banks"),
                       Error);
  CHECK_THROWS_WITH_AS(metrics::retention_pattern(f, {{1}, {1, 0, 0, 1}, {1, 1, 1, 0, 0, 0}}),
                       doctest::Contains("gates"), Error);
}

TEST_CASE("retention csv lists one exact row per bank") {
  const auto f = toy_fabric();
  const auto p = metrics::retention_pattern(f, {{1, 1, 1}, {1, 0, 0, 1}, {0, 0, 0, 0, 0, 0}});
  CHECK(metrics::retention_csv(p) ==
        "layer,kind,kept,total,fraction\n"
        "0,conv,3,3,1\n"
        "0,mhsa,2,4,0.5\n"
        "0,ffn,0,6,0\n");
}

TEST_CASE("pattern distance is an aligned L1 sum") {
  const auto f = toy_fabric();
  const auto a = metrics::retention_pattern(f, {{1, 1, 1}, {1, 0, 0, 1}, {1, 1, 1, 0, 0, 0}});
  const auto b = metrics::retention_pattern(f, {{1, 1, 0}, {1, 1, 1, 1}, {1, 1, 1, 0, 0, 0}});
  CHECK(metrics::pattern_l1_distance(a, a) == 0.0);
  // |1 - 2/3| + |1/2 - 1| + |1/2 - 1/2|
  CHECK(metrics::pattern_l1_distance(a, b) ==
        doctest::Approx(1.0 / 3.0 + 0.5).epsilon(1e-12));
  auto c = a;
  c.pop_back();
  CHECK_THROWS_WITH_AS(metrics::pattern_l1_distance(a, c), doctest::Contains("row count"), Error);
  auto d = b;
  d[1].kind = "conv";
  CHECK_THROWS_WITH_AS(metrics::pattern_l1_distance(a, d), doctest::Contains("misaligned"),
                       Error);
}
