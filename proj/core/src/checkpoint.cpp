#include "npp/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "npp/errors.hpp"
#include "npp/hash.hpp"

namespace npp::training {

namespace {

constexpr char kMagic[8] = {'N', 'P', 'P', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;

// Little-endian plain-old-data serialization into a growing byte buffer.
struct Writer {
  std::string buf;

  template <class T>
  void pod(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    buf.append(tmp, sizeof(T));
  }
  void bytes(const void* p, size_t n) { buf.append(static_cast<const char*>(p), n); }
  void str(const std::string& s) {
    pod(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
};

struct Reader {
  const char* p;
  const char* end;

  void need(size_t n) const {
    if (static_cast<size_t>(end - p) < n) throw format_error("checkpoint: truncated");
  }
  template <class T>
  T pod() {
    static_assert(std::is_trivially_copyable_v<T>);
    need(sizeof(T));
    T v;
    std::memcpy(&v, p, sizeof(T));
    p += sizeof(T);
    return v;
  }
  void bytes(void* out, size_t n) {
    need(n);
    std::memcpy(out, p, n);
    p += n;
  }
  std::string str() {
    const uint32_t n = pod<uint32_t>();
    if (n > (1u << 24)) throw format_error("checkpoint: implausible string length");
    need(n);
    std::string s(p, n);
    p += n;
    return s;
  }
};

void write_model_config(Writer& w, const model::ModelConfig& c) {
  w.pod<int32_t>(c.levels);
  w.pod<int32_t>(c.base_channels);
  w.pod<int32_t>(c.max_channels);
  w.pod<int32_t>(c.convs_per_level);
  w.pod<int32_t>(c.bottleneck_blocks);
  w.pod<int32_t>(c.heads);
  w.pod<double>(c.mlp_ratio);
  w.pod<double>(c.leaky_slope);
  w.pod<int32_t>(c.multiplier_downsample);
  w.pod<uint8_t>(c.mode == model::Mode::multiplier ? 0 : 1);
  w.pod<uint32_t>(static_cast<uint32_t>(c.hyper_hidden.size()));
  for (int h : c.hyper_hidden) w.pod<int32_t>(h);
}

model::ModelConfig read_model_config(Reader& r) {
  model::ModelConfig c;
  c.levels = r.pod<int32_t>();
  c.base_channels = r.pod<int32_t>();
  c.max_channels = r.pod<int32_t>();
  c.convs_per_level = r.pod<int32_t>();
  c.bottleneck_blocks = r.pod<int32_t>();
  c.heads = r.pod<int32_t>();
  c.mlp_ratio = r.pod<double>();
  c.leaky_slope = r.pod<double>();
  c.multiplier_downsample = r.pod<int32_t>();
  c.mode = r.pod<uint8_t>() == 0 ? model::Mode::multiplier : model::Mode::direct;
  const uint32_t nh = r.pod<uint32_t>();
  if (nh > 64) throw format_error("checkpoint: implausible hyper width count");
  c.hyper_hidden.clear();
  for (uint32_t i = 0; i < nh; ++i) c.hyper_hidden.push_back(r.pod<int32_t>());
  return c;
}

void write_train_config(Writer& w, const TrainConfig& c) {
  w.pod<double>(c.lr0);
  w.pod<int32_t>(c.max_epochs);
  w.pod<int32_t>(c.halve_epoch);
  w.pod<int32_t>(c.batch_size);
  w.pod<double>(c.adam_beta1);
  w.pod<double>(c.adam_beta2);
  w.pod<double>(c.adam_eps);
  w.pod<double>(c.lambda_log10_lo);
  w.pod<double>(c.lambda_log10_hi);
  w.pod<uint64_t>(c.seed);
  w.pod<int32_t>(c.checkpoint_every);
  w.pod<double>(c.fixed_lambda);
}

TrainConfig read_train_config(Reader& r) {
  TrainConfig c;
  c.lr0 = r.pod<double>();
  c.max_epochs = r.pod<int32_t>();
  c.halve_epoch = r.pod<int32_t>();
  c.batch_size = r.pod<int32_t>();
  c.adam_beta1 = r.pod<double>();
  c.adam_beta2 = r.pod<double>();
  c.adam_eps = r.pod<double>();
  c.lambda_log10_lo = r.pod<double>();
  c.lambda_log10_hi = r.pod<double>();
  c.seed = r.pod<uint64_t>();
  c.checkpoint_every = r.pod<int32_t>();
  c.fixed_lambda = r.pod<double>();
  return c;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.pod<uint32_t>(kVersion);
  write_model_config(w, ck.model_config);
  write_train_config(w, ck.train_config);
  for (int64_t d : ck.grid_dims) w.pod<int64_t>(d);
  w.pod<int64_t>(ck.epoch);
  w.pod<int64_t>(ck.step);

  w.pod<uint32_t>(static_cast<uint32_t>(ck.params.count()));
  for (const auto& [name, t] : ck.params) {
    w.str(name);
    w.pod<uint32_t>(static_cast<uint32_t>(t.shape.size()));
    for (int64_t d : t.shape) w.pod<int64_t>(d);
    w.bytes(t.vals->data(), t.vals->size() * sizeof(float));
  }

  w.pod<uint64_t>(ck.opt.step);
  for (const auto& [name, t] : ck.params) {
    const auto& m = ck.opt.m.at(name);
    const auto& v = ck.opt.v.at(name);
    if (static_cast<int64_t>(m.size()) != t.size() || static_cast<int64_t>(v.size()) != t.size())
      throw domain_error("checkpoint: optimizer state shape mismatch for " + name);
    w.bytes(m.data(), m.size() * sizeof(float));
    w.bytes(v.data(), v.size() * sizeof(float));
  }
  w.str(ck.rng_state);
  w.pod<uint64_t>(fnv1a64(w.buf.data(), w.buf.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot write checkpoint: " + path.string());
  f.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
  if (!f) throw io_error("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open checkpoint: " + path.string());
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kMagic) + sizeof(uint32_t) + sizeof(uint64_t))
    throw format_error("checkpoint: file too short");

  const size_t body = buf.size() - sizeof(uint64_t);
  uint64_t stored = 0;
  std::memcpy(&stored, buf.data() + body, sizeof(stored));
  if (stored != fnv1a64(buf.data(), body))
    throw format_error("checkpoint: checksum mismatch (corrupt file)");

  Reader r{buf.data(), buf.data() + body};
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw format_error("checkpoint: bad magic");
  const uint32_t version = r.pod<uint32_t>();
  if (version != kVersion)
    throw format_error("checkpoint: unsupported version " + std::to_string(version));

  Checkpoint ck;
  ck.model_config = read_model_config(r);
  ck.train_config = read_train_config(r);
  for (int64_t& d : ck.grid_dims) d = r.pod<int64_t>();
  ck.epoch = r.pod<int64_t>();
  ck.step = r.pod<int64_t>();

  const uint32_t nparams = r.pod<uint32_t>();
  if (nparams > (1u << 20)) throw format_error("checkpoint: implausible parameter count");
  std::vector<std::string> order;
  for (uint32_t i = 0; i < nparams; ++i) {
    std::string name = r.str();
    const uint32_t ndim = r.pod<uint32_t>();
    if (ndim > 8) throw format_error("checkpoint: implausible rank for " + name);
    ad::Shape shape;
    for (uint32_t d = 0; d < ndim; ++d) shape.push_back(r.pod<int64_t>());
    const int64_t n = ad::numel(shape);
    if (n < 0 || n > (int64_t(1) << 32)) throw format_error("checkpoint: implausible size");
    std::vector<float> vals(static_cast<size_t>(n));
    r.bytes(vals.data(), vals.size() * sizeof(float));
    ck.params.add(name, std::move(shape), std::move(vals));
    order.push_back(std::move(name));
  }

  ck.opt.step = r.pod<uint64_t>();
  for (const std::string& name : order) {
    const size_t n = static_cast<size_t>(ck.params.at(name).size());
    std::vector<float> m(n), v(n);
    r.bytes(m.data(), n * sizeof(float));
    r.bytes(v.data(), n * sizeof(float));
    ck.opt.m.emplace(name, std::move(m));
    ck.opt.v.emplace(name, std::move(v));
  }
  ck.rng_state = r.str();
  if (r.p != r.end) throw format_error("checkpoint: trailing bytes");
  return ck;
}

}  // namespace npp::training
