#include "npp/model.hpp"

#include <cmath>

#include "npp/nn_ops.hpp"
#include "npp/rng.hpp"
#include "npp/tensor_ops.hpp"

namespace npp::model {

Mode mode_from_string(const std::string& s) {
  if (s == "multiplier") return Mode::multiplier;
  if (s == "direct") return Mode::direct;
  throw config_error("unknown mode '" + s + "' (expected multiplier or direct)");
}

std::string to_string(Mode m) { return m == Mode::multiplier ? "multiplier" : "direct"; }

int ModelConfig::channels_at(int level) const {
  const int64_t c = static_cast<int64_t>(base_channels) << level;
  return static_cast<int>(std::min<int64_t>(c, max_channels));
}

int ModelConfig::decoder_stages() const {
  if (mode == Mode::direct) return levels - 1;
  // The field head stops one level early when the field lives at half
  // resolution.
  return levels - 1 - (multiplier_downsample == 2 ? 1 : 0);
}

std::vector<int> ModelConfig::conditioned_channels() const {
  std::vector<int> out;
  for (int stage = 0; stage < decoder_stages(); ++stage) {
    const int target = levels - 2 - stage;  // level this stage upsamples into
    for (int i = 0; i < convs_per_level; ++i) out.push_back(channels_at(target));
  }
  return out;
}

int ModelConfig::hyper_out() const {
  int n = 0;
  for (int c : conditioned_channels()) n += c;
  return 2 * n;
}

void ModelConfig::validate() const {
  if (levels < 1) throw config_error("levels must be >= 1");
  if (base_channels < 1) throw config_error("base_channels must be >= 1");
  if (max_channels < base_channels) throw config_error("max_channels below base_channels");
  if (convs_per_level < 1) throw config_error("convs_per_level must be >= 1");
  if (bottleneck_blocks < 0) throw config_error("bottleneck_blocks must be >= 0");
  if (heads < 1) throw config_error("heads must be >= 1");
  if (embed_dim() % heads != 0)
    throw config_error("embed dim " + std::to_string(embed_dim()) + " not divisible by " +
                       std::to_string(heads) + " heads");
  if (mlp_ratio <= 0.0) throw config_error("mlp_ratio must be positive");
  if (multiplier_downsample != 1 && multiplier_downsample != 2)
    throw config_error("multiplier_downsample must be 1 or 2");
  if (mode == Mode::multiplier && multiplier_downsample == 2 && levels < 2)
    throw config_error("half-resolution field needs levels >= 2");
  if (hyper_hidden.empty()) throw config_error("hyper_hidden must not be empty");
  for (int h : hyper_hidden)
    if (h < 1) throw config_error("hyper_hidden widths must be positive");
}

namespace {

constexpr int kPoseHidden = 256;

template <class T>
std::vector<T> uniform_init(Rng& rng, int64_t n, double bound) {
  std::vector<T> v(static_cast<size_t>(n));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return v;
}

template <class T>
void add_conv(ad::ParamStore<T>& p, Rng& rng, const std::string& name, int out_c, int in_c) {
  const int64_t fan_in = static_cast<int64_t>(in_c) * 27;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  p.add(name + ".w", ad::Shape{out_c, in_c, 3, 3, 3},
        uniform_init<T>(rng, static_cast<int64_t>(out_c) * fan_in, bound));
  p.add(name + ".b", ad::Shape{out_c}, uniform_init<T>(rng, out_c, bound));
}

template <class T>
void add_linear(ad::ParamStore<T>& p, Rng& rng, const std::string& name, int out_c, int in_c) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_c));
  p.add(name + ".w", ad::Shape{out_c, in_c},
        uniform_init<T>(rng, static_cast<int64_t>(out_c) * in_c, bound));
  p.add(name + ".b", ad::Shape{out_c}, uniform_init<T>(rng, out_c, bound));
}

template <class T>
void add_linear_zero(ad::ParamStore<T>& p, const std::string& name, int out_c, int in_c) {
  p.add(name + ".w", ad::Shape{out_c, in_c},
        std::vector<T>(static_cast<size_t>(out_c) * static_cast<size_t>(in_c), T(0)));
  p.add(name + ".b", ad::Shape{out_c}, std::vector<T>(static_cast<size_t>(out_c), T(0)));
}

// Per-channel normalization parameters: gain one, shift zero.
template <class T>
void add_norm(ad::ParamStore<T>& p, const std::string& name, int c) {
  p.add(name + ".g", ad::Shape{c}, std::vector<T>(static_cast<size_t>(c), T(1)));
  p.add(name + ".b", ad::Shape{c}, std::vector<T>(static_cast<size_t>(c), T(0)));
}

int mlp_hidden_width(const ModelConfig& cfg) {
  return std::max(static_cast<int>(std::lround(cfg.mlp_ratio * cfg.embed_dim())), 1);
}

}  // namespace

template <class T>
NppModel<T> build_model(const ModelConfig& config, uint64_t seed) {
  config.validate();
  NppModel<T> m;
  m.config = config;
  ad::ParamStore<T>& p = m.params;
  Rng rng(seed);

  // Encoder.
  for (int l = 0; l < config.levels; ++l) {
    const int ch = config.channels_at(l);
    const std::string base = "enc.l" + std::to_string(l);
    for (int i = 0; i < config.convs_per_level; ++i) {
      const int in_c = i > 0 ? ch : (l == 0 ? 1 : config.channels_at(l - 1));
      add_conv(p, rng, base + ".c" + std::to_string(i), ch, in_c);
      add_norm<T>(p, base + ".n" + std::to_string(i), ch);
    }
  }

  // Bottleneck transformer.
  const int e = config.embed_dim();
  const int hid = mlp_hidden_width(config);
  for (int b = 0; b < config.bottleneck_blocks; ++b) {
    const std::string base = "bott.b" + std::to_string(b) + ".";
    add_norm<T>(p, base + "ln1", e);
    add_linear(p, rng, base + "attn.q", e, e);
    add_linear(p, rng, base + "attn.k", e, e);
    add_linear(p, rng, base + "attn.v", e, e);
    add_linear(p, rng, base + "attn.o", e, e);
    add_norm<T>(p, base + "ln2", e);
    add_linear(p, rng, base + "mlp.f0", hid, e);
    add_linear(p, rng, base + "mlp.f1", e, hid);
  }

  // Decoder.
  for (int stage = 0; stage < config.decoder_stages(); ++stage) {
    const int target = config.levels - 2 - stage;
    const int ch = config.channels_at(target);
    const std::string base = "dec.l" + std::to_string(target);
    for (int i = 0; i < config.convs_per_level; ++i) {
      const int in_c = i > 0 ? ch : config.channels_at(target + 1) + ch;
      add_conv(p, rng, base + ".c" + std::to_string(i), ch, in_c);
      add_norm<T>(p, base + ".n" + std::to_string(i), ch);
    }
  }

  // Head emitting the field (or the translated image in direct mode).
  {
    const int depth = config.decoder_stages();
    const int in_c = depth > 0 ? config.channels_at(config.levels - 1 - depth) : e;
    add_conv(p, rng, "out", 1, in_c);
  }

  // Conditioning network on log10(lambda); the final layer starts at zero
  // so conditioning is the identity for a fresh model.
  if (config.hyper_out() > 0) {
    int in_c = 1;
    for (size_t i = 0; i < config.hyper_hidden.size(); ++i) {
      add_linear(p, rng, "hyper.f" + std::to_string(i), config.hyper_hidden[i], in_c);
      in_c = config.hyper_hidden[i];
    }
    add_linear_zero<T>(p, "hyper.f" + std::to_string(config.hyper_hidden.size()),
                       config.hyper_out(), in_c);
  }

  // Pose head; the final layer starts at zero so the predicted transform is
  // exactly the identity.
  add_linear(p, rng, "stn.f0", kPoseHidden, e);
  add_linear_zero<T>(p, "stn.f1", 12, kPoseHidden);

  return m;
}

template <class T>
ad::Tensor<T> hyper_forward(ad::Tape<T>& g, const ModelConfig& config,
                            const ad::ParamStore<T>& params, double lambda) {
  if (!(lambda > 0.0))
    throw domain_error("lambda must be positive, got " + std::to_string(lambda));
  if (config.hyper_out() == 0) return {};
  ad::Tensor<T> h(ad::Shape{1, 1}, std::vector<T>{static_cast<T>(std::log10(lambda))});
  const size_t layers = config.hyper_hidden.size() + 1;
  for (size_t i = 0; i < layers; ++i) {
    const std::string base = "hyper.f" + std::to_string(i);
    h = ad::linear(g, h, params.at(base + ".w"), params.at(base + ".b"));
    if (i + 1 < layers) h = ad::leaky_relu(g, h, 0.0);
  }
  return h;  // [1, hyper_out]
}

template <class T>
ad::Tensor<T> hyper_condition(ad::Tape<T>& g, const ad::Tensor<T>& z, const ad::Tensor<T>& hyper,
                              int layer_index, const ModelConfig& config) {
  const std::vector<int> cond = config.conditioned_channels();
  if (layer_index < 0 || layer_index >= static_cast<int>(cond.size()))
    throw domain_error("hyper_condition: layer index " + std::to_string(layer_index) +
                       " out of range");
  int64_t offset = 0;
  for (int i = 0; i < layer_index; ++i) offset += 2 * cond[static_cast<size_t>(i)];
  const int64_t c = cond[static_cast<size_t>(layer_index)];
  ad::require(z.ndim() == 5 && z.dim(1) == c,
              "hyper_condition: features " + ad::shape_str(z.shape) + " do not carry " +
                  std::to_string(c) + " channels");
  ad::Tensor<T> dalpha = ad::slice_flat(g, hyper, offset, c);
  ad::Tensor<T> beta = ad::slice_flat(g, hyper, offset + c, c);
  ad::Tensor<T> alpha = ad::add_scalar(g, dalpha, 1.0);
  return ad::channel_affine(g, z, alpha, beta);
}

namespace {

template <class T>
struct UnetOut {
  ad::Tensor<T> head;
  ad::Tensor<T> bottleneck;
};

template <class T>
UnetOut<T> unet_forward(ad::Tape<T>& g, const ModelConfig& cfg, const ad::ParamStore<T>& p,
                        const ad::Tensor<T>& x, double lambda) {
  cfg.validate();
  ad::require(x.ndim() == 5 && x.dim(0) == 1 && x.dim(1) == 1,
              "forward: input must be [1,1,D,H,W], got " + ad::shape_str(x.shape));
  const int64_t div = int64_t(1) << (cfg.levels - 1);
  for (int a = 2; a < 5; ++a)
    ad::require(x.dim(a) % div == 0, "forward: extent " + std::to_string(x.dim(a)) +
                                         " not divisible by " + std::to_string(div));

  ad::Tensor<T> hyper = hyper_forward(g, cfg, p, lambda);

  // Encoder with skip connections.
  std::vector<ad::Tensor<T>> skips;
  ad::Tensor<T> h = x;
  for (int l = 0; l < cfg.levels; ++l) {
    const std::string base = "enc.l" + std::to_string(l);
    for (int i = 0; i < cfg.convs_per_level; ++i) {
      const std::string c = base + ".c" + std::to_string(i);
      const std::string n = base + ".n" + std::to_string(i);
      h = ad::conv3d(g, h, p.at(c + ".w"), p.at(c + ".b"), 1, 1);
      h = ad::instance_norm3d(g, h, p.at(n + ".g"), p.at(n + ".b"));
      h = ad::leaky_relu(g, h, cfg.leaky_slope);
    }
    if (l + 1 < cfg.levels) {
      skips.push_back(h);
      h = ad::avg_pool2x(g, h);
    }
  }

  // Bottleneck: flatten voxels to tokens, run the transformer, restore.
  if (cfg.bottleneck_blocks > 0) {
    const int64_t e = h.dim(1);
    const int64_t dd = h.dim(2), hh = h.dim(3), ww = h.dim(4);
    const int64_t tokens = dd * hh * ww;
    ad::Tensor<T> t = ad::transpose2d(g, ad::reshape(g, h, ad::Shape{e, tokens}));
    for (int b = 0; b < cfg.bottleneck_blocks; ++b) {
      ad::ParamSlice<T> slice{&p, "bott.b" + std::to_string(b) + "."};
      t = ad::attention_block(g, t, cfg.heads, slice);
    }
    h = ad::reshape(g, ad::transpose2d(g, t), ad::Shape{1, e, dd, hh, ww});
  }
  ad::Tensor<T> bottleneck = h;

  // Decoder.
  int cond_idx = 0;
  for (int stage = 0; stage < cfg.decoder_stages(); ++stage) {
    const int target = cfg.levels - 2 - stage;
    const std::string base = "dec.l" + std::to_string(target);
    h = ad::upsample_trilinear2x(g, h);
    h = ad::concat_channels(g, h, skips[static_cast<size_t>(target)]);
    for (int i = 0; i < cfg.convs_per_level; ++i) {
      const std::string c = base + ".c" + std::to_string(i);
      const std::string n = base + ".n" + std::to_string(i);
      h = ad::conv3d(g, h, p.at(c + ".w"), p.at(c + ".b"), 1, 1);
      h = ad::instance_norm3d(g, h, p.at(n + ".g"), p.at(n + ".b"));
      h = ad::leaky_relu(g, h, cfg.leaky_slope);
      if (hyper.defined()) h = hyper_condition(g, h, hyper, cond_idx, cfg);
      ++cond_idx;
    }
  }

  UnetOut<T> out;
  out.head = ad::conv3d(g, h, p.at("out.w"), p.at("out.b"), 1, 1);
  out.bottleneck = bottleneck;
  return out;
}

}  // namespace

template <class T>
ad::Tensor<T> predict_multiplier(ad::Tape<T>& g, const ModelConfig& config,
                                 const ad::ParamStore<T>& params, const ad::Tensor<T>& x,
                                 double lambda) {
  if (config.mode != Mode::multiplier)
    throw domain_error("predict_multiplier requires multiplier mode");
  return unet_forward(g, config, params, x, lambda).head;
}

template <class T>
ad::Tensor<T> apply_multiplier(ad::Tape<T>& g, const ad::Tensor<T>& x, const ad::Tensor<T>& chi) {
  ad::require(x.ndim() == 5 && chi.ndim() == 5, "apply_multiplier: rank-5 tensors required");
  ad::Tensor<T> c = chi;
  while (c.dim(2) < x.dim(2)) c = ad::upsample_trilinear2x(g, c);
  ad::require(c.shape == x.shape, "apply_multiplier: field " + ad::shape_str(chi.shape) +
                                      " cannot be upsampled onto " + ad::shape_str(x.shape));
  return ad::mul(g, x, c);
}

template <class T>
std::pair<ad::Tensor<T>, spatial::AffineTransform> stn_affine(ad::Tape<T>& g,
                                                              const ad::Tensor<T>& bottleneck,
                                                              const ad::ParamStore<T>& params) {
  ad::Tensor<T> pooled = ad::global_avg_pool(g, bottleneck);  // [1,E]
  ad::Tensor<T> hidden =
      ad::leaky_relu(g, ad::linear(g, pooled, params.at("stn.f0.w"), params.at("stn.f0.b")), 0.0);
  ad::Tensor<T> raw =
      ad::tanh_op(g, ad::linear(g, hidden, params.at("stn.f1.w"), params.at("stn.f1.b")));
  raw = ad::reshape(g, raw, ad::Shape{12});

  spatial::AffineTransform phi;
  for (int i = 0; i < 9; ++i)
    phi.A[static_cast<size_t>(i)] =
        (i % 4 == 0 ? 1.0 : 0.0) + static_cast<double>(raw[i]);
  for (int i = 0; i < 3; ++i) phi.t[static_cast<size_t>(i)] = static_cast<double>(raw[9 + i]);
  return {raw, phi};
}

template <class T>
NppOutput<T> forward(ad::Tape<T>& g, const ModelConfig& config, const ad::ParamStore<T>& params,
                     const ad::Tensor<T>& x, double lambda, bool apply_warp) {
  UnetOut<T> u = unet_forward(g, config, params, x, lambda);

  NppOutput<T> out;
  if (config.mode == Mode::multiplier) {
    out.chi = u.head;
    ad::Tensor<T> c = u.head;
    while (c.dim(2) < x.dim(2)) c = ad::upsample_trilinear2x(g, c);
    ad::require(c.shape == x.shape, "forward: field resolution mismatch");
    out.chi_full = c;
    out.translated = ad::mul(g, x, c);
  } else {
    out.translated = u.head;
  }

  auto [raw, phi] = stn_affine(g, u.bottleneck, params);
  out.phi_raw = raw;
  out.phi = phi;

  if (apply_warp) {
    // A = I + raw[0:9]; t = raw[9:12]. The identity offset keeps a
    // zero-initialized head at the exact identity map.
    std::vector<T> eye(9, T(0));
    eye[0] = eye[4] = eye[8] = T(1);
    ad::Tensor<T> A =
        ad::add(g, ad::reshape(g, ad::slice_flat(g, raw, 0, 9), ad::Shape{3, 3}),
                ad::Tensor<T>(ad::Shape{3, 3}, std::move(eye)));
    ad::Tensor<T> tvec = ad::slice_flat(g, raw, 9, 3);
    spatial::SamplingGrid<T> grid =
        spatial::affine_grid(g, A, tvec, {x.dim(2), x.dim(3), x.dim(4)});
    out.warped = spatial::trilinear_sample(g, out.translated, grid);
  } else {
    out.warped = out.translated;
  }
  return out;
}

#define NPP_INSTANTIATE_MODEL(T)                                                          \
  template NppModel<T> build_model<T>(const ModelConfig&, uint64_t);                      \
  template ad::Tensor<T> predict_multiplier<T>(ad::Tape<T>&, const ModelConfig&,          \
                                               const ad::ParamStore<T>&,                  \
                                               const ad::Tensor<T>&, double);             \
  template ad::Tensor<T> apply_multiplier<T>(ad::Tape<T>&, const ad::Tensor<T>&,          \
                                             const ad::Tensor<T>&);                       \
  template ad::Tensor<T> hyper_condition<T>(ad::Tape<T>&, const ad::Tensor<T>&,           \
                                            const ad::Tensor<T>&, int, const ModelConfig&); \
  template ad::Tensor<T> hyper_forward<T>(ad::Tape<T>&, const ModelConfig&,               \
                                          const ad::ParamStore<T>&, double);              \
  template std::pair<ad::Tensor<T>, spatial::AffineTransform> stn_affine<T>(              \
      ad::Tape<T>&, const ad::Tensor<T>&, const ad::ParamStore<T>&);                     \
  template NppOutput<T> forward<T>(ad::Tape<T>&, const ModelConfig&,                      \
                                   const ad::ParamStore<T>&, const ad::Tensor<T>&,        \
                                   double, bool);

NPP_INSTANTIATE_MODEL(float)
NPP_INSTANTIATE_MODEL(double)
#undef NPP_INSTANTIATE_MODEL

}  // namespace npp::model
