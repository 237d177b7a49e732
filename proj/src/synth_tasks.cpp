#include "synth_tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <utility>

#include "rng.hpp"

namespace hp::task {

void SvTaskSpec::validate() const {
  HP_CHECK(num_classes >= 2 && eval_classes >= 2, "need at least two classes per split");
  HP_CHECK(frames >= 2 && feat_dim >= 1, "degenerate sequence geometry");
  HP_CHECK(train_per_class >= 1 && eval_per_class >= 2,
           "need utterances per class (eval needs pairs)");
  HP_CHECK(prototype_scale > 0.0 && noise_scale >= 0.0, "bad scales");
  HP_CHECK(mixing_depth >= 1, "mixing depth must be at least 1");
}

void SpoofTaskSpec::validate() const {
  HP_CHECK(frames >= 4 && feat_dim >= 1, "degenerate sequence geometry");
  HP_CHECK(train_n >= 2 && eval_n >= 2, "need samples in both splits");
  HP_CHECK(amplitude >= 0.0, "amplitude must be nonnegative");
  HP_CHECK(artifact_period >= 1, "artifact period must be positive");
  HP_CHECK(spoof_fraction >= 0.0 && spoof_fraction <= 1.0, "spoof fraction must lie in [0,1]");
  HP_CHECK(smooth_window >= 1, "smoothing window must be positive");
}

namespace {

// Shared fixed mixing stack: depth layers of y = tanh(W x), entries seeded.
std::vector<std::vector<double>> mixing_weights(const SvTaskSpec& s) {
  const int64_t F = s.feat_dim;
  std::vector<std::vector<double>> ws(static_cast<size_t>(s.mixing_depth));
  const double scale = 1.25 / std::sqrt(static_cast<double>(F));
  for (int64_t l = 0; l < s.mixing_depth; ++l) {
    auto& w = ws[static_cast<size_t>(l)];
    w.resize(static_cast<size_t>(F * F));
    for (int64_t i = 0; i < F * F; ++i)
      w[static_cast<size_t>(i)] = scale * rng::gaussian(s.seed, rng::kSvMixing,
                                                        static_cast<uint64_t>(l),
                                                        static_cast<uint64_t>(i));
  }
  return ws;
}

Utterance make_sv_utterance(const SvTaskSpec& s, const std::vector<std::vector<double>>& mix,
                            int64_t class_id, int64_t utt) {
  const int64_t T = s.frames, F = s.feat_dim;
  std::vector<double> proto(static_cast<size_t>(F));
  for (int64_t d = 0; d < F; ++d)
    proto[static_cast<size_t>(d)] =
        s.prototype_scale * rng::gaussian(s.seed, rng::kSvPrototype, static_cast<uint64_t>(class_id),
                                          static_cast<uint64_t>(d));
  std::vector<double> out(static_cast<size_t>(T * F));
  std::vector<double> x(static_cast<size_t>(F)), y(static_cast<size_t>(F));
  for (int64_t t = 0; t < T; ++t) {
    for (int64_t d = 0; d < F; ++d)
      x[static_cast<size_t>(d)] =
          proto[static_cast<size_t>(d)] +
          s.noise_scale * rng::gaussian(s.seed, rng::kSvNoise, static_cast<uint64_t>(class_id),
                                        static_cast<uint64_t>(utt),
                                        static_cast<uint64_t>(t * F + d));
    for (const auto& w : mix) {
      for (int64_t i = 0; i < F; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < F; ++j)
          acc += w[static_cast<size_t>(i * F + j)] * x[static_cast<size_t>(j)];
        y[static_cast<size_t>(i)] = std::tanh(acc);
      }
      std::swap(x, y);
    }
    for (int64_t d = 0; d < F; ++d) out[static_cast<size_t>(t * F + d)] = x[static_cast<size_t>(d)];
  }
  return {class_id, Tensor::from_vector({T, F}, out, Dtype::F64, false)};
}

}  // namespace

SvData gen_sv(const SvTaskSpec& spec) {
  spec.validate();
  SvData data;
  data.spec = spec;
  auto mix = mixing_weights(spec);
  for (int64_t c = 0; c < spec.num_classes; ++c)
    for (int64_t u = 0; u < spec.train_per_class; ++u)
      data.train.push_back(make_sv_utterance(spec, mix, c, u));
  // held-out identities: ids continue past the training range, so disjointness
  // holds by construction
  for (int64_t c = 0; c < spec.eval_classes; ++c)
    for (int64_t u = 0; u < spec.eval_per_class; ++u)
      data.eval.push_back(make_sv_utterance(spec, mix, spec.num_classes + c, u));

  // all same-class pairs are targets; equally many distinct cross-class pairs
  std::vector<Trial> targets;
  const int64_t n_eval = static_cast<int64_t>(data.eval.size());
  for (int64_t i = 0; i < n_eval; ++i)
    for (int64_t j = i + 1; j < n_eval; ++j)
      if (data.eval[static_cast<size_t>(i)].label == data.eval[static_cast<size_t>(j)].label)
        targets.push_back({static_cast<int32_t>(i), static_cast<int32_t>(j), true});
  const int64_t cross_total = n_eval * (n_eval - 1) / 2 - static_cast<int64_t>(targets.size());
  const int64_t want = std::min<int64_t>(static_cast<int64_t>(targets.size()), cross_total);
  std::set<std::pair<int32_t, int32_t>> seen;
  std::vector<Trial> nontargets;
  for (uint64_t ctr = 0; static_cast<int64_t>(nontargets.size()) < want; ++ctr) {
    HP_CHECK(ctr < 50'000'000, "trial sampling failed to find enough cross-class pairs");
    auto i = static_cast<int32_t>(rng::uniform_index(static_cast<uint64_t>(n_eval), spec.seed,
                                                     rng::kTrialPairs, ctr, 0));
    auto j = static_cast<int32_t>(rng::uniform_index(static_cast<uint64_t>(n_eval), spec.seed,
                                                     rng::kTrialPairs, ctr, 1));
    if (i == j) continue;
    if (i > j) std::swap(i, j);
    if (data.eval[static_cast<size_t>(i)].label == data.eval[static_cast<size_t>(j)].label) continue;
    if (!seen.insert({i, j}).second) continue;
    nontargets.push_back({i, j, false});
  }
  data.trials.assign(targets.begin(), targets.begin() + want);
  data.trials.insert(data.trials.end(), nontargets.begin(), nontargets.end());
  return data;
}

namespace {

Utterance make_spoof_utterance(const SpoofTaskSpec& s, int64_t index, bool eval_split) {
  const int64_t T = s.frames, F = s.feat_dim, W = s.smooth_window;
  const uint64_t tag = (eval_split ? (1ull << 40) : 0ull) + static_cast<uint64_t>(index);
  // moving average over W raw frames: generate T+W-1 and slide
  std::vector<double> raw(static_cast<size_t>((T + W - 1) * F));
  for (int64_t t = 0; t < T + W - 1; ++t)
    for (int64_t d = 0; d < F; ++d)
      raw[static_cast<size_t>(t * F + d)] =
          rng::gaussian(s.seed, rng::kSpoofBase, tag, static_cast<uint64_t>(t * F + d));
  std::vector<double> out(static_cast<size_t>(T * F), 0.0);
  for (int64_t t = 0; t < T; ++t)
    for (int64_t d = 0; d < F; ++d) {
      double acc = 0.0;
      for (int64_t k = 0; k < W; ++k) acc += raw[static_cast<size_t>((t + k) * F + d)];
      out[static_cast<size_t>(t * F + d)] = acc / static_cast<double>(W);
    }
  // Bresenham-style balance: exactly floor(n*frac) spoofed in every prefix
  const double frac = s.spoof_fraction;
  const bool spoofed = std::floor((static_cast<double>(index) + 1.0) * frac) -
                           std::floor(static_cast<double>(index) * frac) >
                       0.5;
  if (spoofed && s.amplitude > 0.0) {
    const int64_t span = T / 2;
    const int64_t start = static_cast<int64_t>(rng::uniform_index(
        static_cast<uint64_t>(T - span + 1), s.seed, rng::kSpoofArtifact, tag));
    for (int64_t k = 0; k < span; ++k) {
      const double sign = ((k / s.artifact_period) % 2 == 0) ? 1.0 : -1.0;
      for (int64_t d = 0; d < F; ++d)
        out[static_cast<size_t>((start + k) * F + d)] += s.amplitude * sign;
    }
  }
  return {spoofed ? 1 : 0, Tensor::from_vector({T, F}, out, Dtype::F64, false)};
}

}  // namespace

SpoofData gen_spoof(const SpoofTaskSpec& spec) {
  spec.validate();
  SpoofData data;
  data.spec = spec;
  for (int64_t i = 0; i < spec.train_n; ++i)
    data.train.push_back(make_spoof_utterance(spec, i, false));
  for (int64_t i = 0; i < spec.eval_n; ++i)
    data.eval.push_back(make_spoof_utterance(spec, i, true));
  return data;
}

SvTaskSpec sv_full(uint64_t seed) {
  SvTaskSpec s;
  s.train_per_class = 96;
  s.seed = seed;
  return s;
}

SvTaskSpec sv_small_data(uint64_t seed) {
  SvTaskSpec s;
  s.train_per_class = 32;  // ~2k training utterances
  s.seed = seed;
  return s;
}

SpoofTaskSpec spoof_default(uint64_t seed) {
  SpoofTaskSpec s;
  s.seed = seed;
  return s;
}

namespace {

template <class T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

}  // namespace

void export_dataset(const std::string& path, const std::vector<Utterance>& utts) {
  HP_CHECK(!utts.empty(), "refusing to export an empty dataset");
  const Shape shape = utts.front().x.shape();
  HP_CHECK(shape.size() == 2, "utterances must be [frames, feat]");
  for (const Utterance& u : utts)
    HP_CHECK(u.x.shape() == shape, "all exported utterances must share one shape");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  HP_CHECK(f.good(), "cannot open " << path << " for writing");
  f.write("HPDS", 4);
  put<uint32_t>(f, 1u);  // format version
  put<uint64_t>(f, static_cast<uint64_t>(utts.size()));
  put<uint64_t>(f, static_cast<uint64_t>(shape[0]));
  put<uint64_t>(f, static_cast<uint64_t>(shape[1]));
  for (const Utterance& u : utts) {
    put<int64_t>(f, u.label);
    for (int64_t i = 0; i < u.x.numel(); ++i) put<float>(f, static_cast<float>(u.x.value_at(i)));
  }
  HP_CHECK(f.good(), "write failure on " << path);
}

}  // namespace hp::task
