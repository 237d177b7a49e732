#include "checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "common.hpp"

namespace hp::ckpt {
namespace {

constexpr char kMagic[4] = {'H', 'P', 'C', 'K'};

struct Writer {
  std::vector<uint8_t> out;

  void u8(uint8_t v) { out.push_back(v); }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(uint8_t(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(uint8_t(v >> (8 * i)));
  }
  void i64(int64_t v) { u64(uint64_t(v)); }
  void f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void str(const std::string& s) {
    u32(uint32_t(s.size()));
    out.insert(out.end(), s.begin(), s.end());
  }
  void reals(const std::vector<double>& v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
  void blob(const TensorBlob& b) {
    str(b.name);
    reals(b.data);
  }
};

struct Reader {
  const std::vector<uint8_t>& in;
  size_t pos = 0;

  void need(size_t n) const {
    HP_CHECK(pos + n <= in.size(), "checkpoint truncated at byte " << pos << " (need " << n
                                                                   << " more of " << in.size()
                                                                   << ")");
  }
  uint8_t u8() {
    need(1);
    return in[pos++];
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(in[pos + size_t(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(in[pos + size_t(i)]) << (8 * i);
    pos += 8;
    return v;
  }
  int64_t i64() { return int64_t(u64()); }
  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(in.data() + pos), n);
    pos += n;
    return s;
  }
  std::vector<double> reals() {
    uint64_t n = u64();
    HP_CHECK(n <= (in.size() - pos) / 8, "checkpoint array length " << n << " overruns file");
    std::vector<double> v(n);
    for (uint64_t i = 0; i < n; ++i) v[i] = f64();
    return v;
  }
  TensorBlob blob() {
    TensorBlob b;
    b.name = str();
    b.data = reals();
    return b;
  }
  // Element counts for containers of multi-byte records; bounds the resize.
  uint64_t count() {
    uint64_t n = u64();
    HP_CHECK(n <= in.size() - pos, "checkpoint count " << n << " overruns file");
    return n;
  }
};

}  // namespace

std::vector<uint8_t> serialize(const Checkpoint& c) {
  Writer w;
  w.out.insert(w.out.end(), kMagic, kMagic + 4);
  w.u32(kVersion);
  w.u32(c.compacted ? 1 : 0);
  w.i64(c.step);
  w.i64(c.epoch);
  w.str(c.config_text);

  const model::Arch& a = c.arch;
  w.i64(a.feat_dim);
  w.i64(a.d_model);
  w.i64(a.d_head);
  w.i64(a.pooling_heads);
  w.i64(a.embedding_dim);
  w.u8(uint8_t(a.head));
  w.i64(a.num_classes);
  w.i64(a.max_frames);
  w.u32(uint32_t(a.conv.size()));
  for (const model::ConvSpec& cs : a.conv) {
    w.i64(cs.channels);
    w.i64(cs.kernel);
    w.i64(cs.stride);
  }
  w.u32(uint32_t(a.blocks.size()));
  for (const model::BlockArch& b : a.blocks) {
    w.i64(b.heads);
    w.i64(b.ffn);
  }

  w.u64(c.params.size());
  for (const TensorBlob& b : c.params) w.blob(b);
  w.u64(c.log_alphas.size());
  for (const TensorBlob& b : c.log_alphas) w.blob(b);

  w.f64(c.lambda1);
  w.f64(c.lambda2);

  w.i64(c.opt_steps);
  w.u64(c.opt_groups.size());
  for (const OptGroupState& g : c.opt_groups) {
    w.u64(g.slots.size());
    for (const OptSlotState& s : g.slots) {
      w.reals(s.m);
      w.reals(s.v);
    }
  }
  return std::move(w.out);
}

Checkpoint deserialize(const std::vector<uint8_t>& bytes) {
  Reader r{bytes};
  r.need(4);
  HP_CHECK(std::memcmp(bytes.data(), kMagic, 4) == 0, "not a checkpoint file (bad magic)");
  r.pos = 4;
  uint32_t version = r.u32();
  HP_CHECK(version == kVersion,
           "unsupported checkpoint version " << version << " (can read " << kVersion << ")");

  Checkpoint c;
  c.compacted = (r.u32() & 1) != 0;
  c.step = r.i64();
  c.epoch = r.i64();
  c.config_text = r.str();

  model::Arch& a = c.arch;
  a.feat_dim = r.i64();
  a.d_model = r.i64();
  a.d_head = r.i64();
  a.pooling_heads = r.i64();
  a.embedding_dim = r.i64();
  a.head = model::HeadKind(r.u8());
  a.num_classes = r.i64();
  a.max_frames = r.i64();
  uint32_t n_conv = r.u32();
  HP_CHECK(n_conv <= (bytes.size() - r.pos) / 24, "checkpoint conv count overruns file");
  a.conv.resize(n_conv);
  for (model::ConvSpec& cs : a.conv) {
    cs.channels = r.i64();
    cs.kernel = r.i64();
    cs.stride = r.i64();
  }
  uint32_t n_blocks = r.u32();
  HP_CHECK(n_blocks <= (bytes.size() - r.pos) / 16, "checkpoint block count overruns file");
  a.blocks.resize(n_blocks);
  for (model::BlockArch& b : a.blocks) {
    b.heads = r.i64();
    b.ffn = r.i64();
  }

  c.params.resize(r.count());
  for (TensorBlob& b : c.params) b = r.blob();
  c.log_alphas.resize(r.count());
  for (TensorBlob& b : c.log_alphas) b = r.blob();

  c.lambda1 = r.f64();
  c.lambda2 = r.f64();

  c.opt_steps = r.i64();
  c.opt_groups.resize(r.count());
  for (OptGroupState& g : c.opt_groups) {
    g.slots.resize(r.count());
    for (OptSlotState& s : g.slots) {
      s.m = r.reals();
      s.v = r.reals();
    }
  }
  HP_CHECK(r.pos == bytes.size(), "checkpoint has " << bytes.size() - r.pos
                                                    << " trailing bytes");
  return c;
}

void save(const std::string& path, const Checkpoint& c) {
  const std::vector<uint8_t> bytes = serialize(c);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  HP_CHECK(f.good(), "cannot open '" << path << "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  f.close();
  HP_CHECK(f.good(), "short write to '" << path << "'");
}

Checkpoint load(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  HP_CHECK(f.good(), "cannot open checkpoint '" << path << "'");
  const std::streamsize n = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(n));
  f.read(reinterpret_cast<char*>(bytes.data()), n);
  HP_CHECK(f.good(), "short read from '" << path << "'");
  return deserialize(bytes);
}

}  // namespace hp::ckpt
