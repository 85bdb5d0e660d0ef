#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "npp/errors.hpp"
#include "npp/model.hpp"
#include "npp/rng.hpp"
#include "npp/tensor_ops.hpp"

using namespace npp;
using ad::Tape;
using ad::Tensor;
using model::Mode;
using model::ModelConfig;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.levels = 3;
  cfg.base_channels = 4;
  cfg.heads = 2;
  cfg.bottleneck_blocks = 1;
  cfg.hyper_hidden = {8, 16};
  return cfg;
}

Tensor<float> random_input(uint64_t seed, int64_t s = 8) {
  Rng rng(seed);
  Tensor<float> x = Tensor<float>::zeros({1, 1, s, s, s});
  for (int64_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.uniform(0.0, 1.0));
  return x;
}

std::string hyper_final(const ModelConfig& cfg) {
  return "hyper.f" + std::to_string(cfg.hyper_hidden.size());
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("mode names round-trip and reject unknowns") {
  CHECK(model::mode_from_string("multiplier") == Mode::multiplier);
  CHECK(model::mode_from_string("direct") == Mode::direct);
  CHECK(model::to_string(Mode::multiplier) == "multiplier");
  CHECK(model::to_string(Mode::direct) == "direct");
  CHECK_THROWS_AS(model::mode_from_string("banana"), config_error);
}

TEST_CASE("channel schedule caps at max_channels") {
  ModelConfig cfg = small_config();
  cfg.base_channels = 8;
  cfg.max_channels = 16;
  CHECK(cfg.channels_at(0) == 8);
  CHECK(cfg.channels_at(1) == 16);
  CHECK(cfg.channels_at(2) == 16);
  CHECK(cfg.embed_dim() == 16);
}

TEST_CASE("conditioning width covers a scale and shift per decoder channel") {
  const ModelConfig cfg = small_config();
  const std::vector<int> cond = cfg.conditioned_channels();
  const int total = std::accumulate(cond.begin(), cond.end(), 0);
  CHECK(cfg.hyper_out() == 2 * total);
  CHECK(static_cast<int>(cond.size()) == cfg.decoder_stages() * cfg.convs_per_level);

  // A half-resolution field stops the decoder one stage early; the direct
  // head decodes back to full resolution.
  ModelConfig full = cfg;
  full.multiplier_downsample = 1;
  CHECK(full.decoder_stages() == cfg.decoder_stages() + 1);
  ModelConfig direct = cfg;
  direct.mode = Mode::direct;
  CHECK(direct.decoder_stages() == cfg.levels - 1);
}

TEST_CASE("config validation rejects inconsistent settings") {
  CHECK_NOTHROW(small_config().validate());
  ModelConfig cfg = small_config();
  cfg.levels = 0;
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg = small_config();
  cfg.heads = 3;  // embed dim 16 is not divisible by 3
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg = small_config();
  cfg.multiplier_downsample = 3;
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg = small_config();
  cfg.hyper_hidden.clear();
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg = small_config();
  cfg.max_channels = cfg.base_channels - 1;
  CHECK_THROWS_AS(cfg.validate(), config_error);
}

TEST_CASE("fresh models are seed-deterministic") {
  const ModelConfig cfg = small_config();
  model::NppModel<float> a = model::build_model<float>(cfg, 7);
  model::NppModel<float> b = model::build_model<float>(cfg, 7);
  model::NppModel<float> c = model::build_model<float>(cfg, 8);
  CHECK(a.params.count() == b.params.count());
  bool any_diff_seed = false;
  for (const auto& [name, t] : a.params) {
    const Tensor<float>& tb = b.params.at(name);
    REQUIRE(tb.size() == t.size());
    for (int64_t i = 0; i < t.size(); ++i) CHECK(t[i] == tb[i]);
    const Tensor<float>& tc = c.params.at(name);
    for (int64_t i = 0; i < t.size(); ++i) any_diff_seed = any_diff_seed || t[i] != tc[i];
  }
  CHECK(any_diff_seed);
}

TEST_CASE("pose and conditioning heads start at exactly zero") {
  const ModelConfig cfg = small_config();
  model::NppModel<float> m = model::build_model<float>(cfg, 3);
  for (const std::string& base : {std::string("stn.f1"), hyper_final(cfg)})
    for (const char* part : {".w", ".b"}) {
      const Tensor<float>& t = m.params.at(base + part);
      for (int64_t i = 0; i < t.size(); ++i) CHECK(t[i] == 0.0f);
    }
}

TEST_CASE("fresh model predicts the exact identity pose") {
  const ModelConfig cfg = small_config();
  model::NppModel<float> m = model::build_model<float>(cfg, 5);
  Tape<float> g;
  const model::NppOutput<float> out = model::forward(g, cfg, m.params, random_input(50), 0.1, true);

  for (int i = 0; i < 12; ++i) CHECK(out.phi_raw[i] == 0.0f);
  for (int i = 0; i < 9; ++i)
    CHECK(out.phi.A[static_cast<size_t>(i)] == (i % 4 == 0 ? 1.0 : 0.0));
  for (double t : out.phi.t) CHECK(t == 0.0);

  // Identity pose resamples every voxel onto itself with no interpolation.
  REQUIRE(out.warped.size() == out.translated.size());
  for (int64_t i = 0; i < out.warped.size(); ++i) CHECK(out.warped[i] == out.translated[i]);
}

TEST_CASE("translated image is exactly the input times the upsampled field") {
  const ModelConfig cfg = small_config();
  model::NppModel<float> m = model::build_model<float>(cfg, 6);
  const Tensor<float> x = random_input(60);
  Tape<float> g;
  const model::NppOutput<float> out = model::forward(g, cfg, m.params, x, 0.1, false);

  CHECK(out.chi.dim(2) == x.dim(2) / 2);  // field lives at half resolution
  CHECK(out.chi_full.shape == x.shape);
  REQUIRE(out.translated.size() == x.size());
  for (int64_t i = 0; i < x.size(); ++i) CHECK(out.translated[i] == x[i] * out.chi_full[i]);
}

TEST_CASE("conditioning is the identity at initialization") {
  const ModelConfig cfg = small_config();
  model::NppModel<float> m = model::build_model<float>(cfg, 9);
  const Tensor<float> x = random_input(90);
  Tape<float> g1, g2;
  const model::NppOutput<float> lo = model::forward(g1, cfg, m.params, x, 0.001, false);
  const model::NppOutput<float> hi = model::forward(g2, cfg, m.params, x, 10.0, false);
  REQUIRE(lo.translated.size() == hi.translated.size());
  for (int64_t i = 0; i < lo.translated.size(); ++i) CHECK(lo.translated[i] == hi.translated[i]);
}

TEST_CASE("a perturbed conditioning head makes lambda matter") {
  const ModelConfig cfg = small_config();
  model::NppModel<float> m = model::build_model<float>(cfg, 10);
  Rng rng(11);
  Tensor<float>& w = m.params.at(hyper_final(cfg) + ".w");
  for (int64_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(rng.uniform(-0.1, 0.1));

  const Tensor<float> x = random_input(100);
  Tape<float> g1, g2;
  const model::NppOutput<float> lo = model::forward(g1, cfg, m.params, x, 0.001, false);
  const model::NppOutput<float> hi = model::forward(g2, cfg, m.params, x, 10.0, false);
  bool differs = false;
  for (int64_t i = 0; i < lo.translated.size() && !differs; ++i)
    differs = lo.translated[i] != hi.translated[i];
  CHECK(differs);
}

TEST_CASE("conditioning vector has the documented layout") {
  const ModelConfig cfg = small_config();
  model::NppModel<float> m = model::build_model<float>(cfg, 12);
  Tape<float> g;
  const Tensor<float> h = model::hyper_forward(g, cfg, m.params, 0.1);
  CHECK(h.ndim() == 2);
  CHECK(h.dim(0) == 1);
  CHECK(h.dim(1) == cfg.hyper_out());
  CHECK_THROWS_AS(model::hyper_forward(g, cfg, m.params, 0.0), domain_error);
  CHECK_THROWS_AS(model::hyper_forward(g, cfg, m.params, -1.0), domain_error);

  const int n_cond = static_cast<int>(cfg.conditioned_channels().size());
  Tensor<float> z = Tensor<float>::zeros({1, cfg.conditioned_channels()[0], 2, 2, 2});
  for (int64_t i = 0; i < z.size(); ++i) z[i] = 1.0f;
  CHECK_THROWS_AS(model::hyper_condition(g, z, h, n_cond, cfg), domain_error);
  CHECK_THROWS_AS(model::hyper_condition(g, z, h, -1, cfg), domain_error);
  // Zero conditioning output leaves features untouched.
  const Tensor<float> zc = model::hyper_condition(g, z, h, 0, cfg);
  for (int64_t i = 0; i < z.size(); ++i) CHECK(zc[i] == z[i]);
}

TEST_CASE("pose head output stays bounded and maps into the transform") {
  const ModelConfig cfg = small_config();
  model::NppModel<float> m = model::build_model<float>(cfg, 13);
  Rng rng(14);
  for (const char* part : {"stn.f1.w", "stn.f1.b"}) {
    Tensor<float>& t = m.params.at(part);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(-2.0, 2.0));
  }
  Tape<float> g;
  const model::NppOutput<float> out = model::forward(g, cfg, m.params, random_input(130), 0.1, false);
  bool any_nonzero = false;
  for (int i = 0; i < 12; ++i) {
    CHECK(std::abs(out.phi_raw[i]) < 1.0f);  // tanh-bounded
    any_nonzero = any_nonzero || out.phi_raw[i] != 0.0f;
  }
  CHECK(any_nonzero);
  for (int i = 0; i < 9; ++i)
    CHECK(out.phi.A[static_cast<size_t>(i)] ==
          doctest::Approx((i % 4 == 0 ? 1.0 : 0.0) + static_cast<double>(out.phi_raw[i])));
  for (int i = 0; i < 3; ++i)
    CHECK(out.phi.t[static_cast<size_t>(i)] ==
          doctest::Approx(static_cast<double>(out.phi_raw[9 + i])));
}

TEST_CASE("direct mode emits the translated image without a field") {
  ModelConfig cfg = small_config();
  cfg.mode = Mode::direct;
  model::NppModel<float> m = model::build_model<float>(cfg, 15);
  const Tensor<float> x = random_input(150);
  Tape<float> g;
  const model::NppOutput<float> out = model::forward(g, cfg, m.params, x, 0.1, true);
  CHECK(out.chi.size() == 0);
  CHECK(out.chi_full.size() == 0);
  CHECK(out.translated.shape == x.shape);
  CHECK_THROWS_AS(model::predict_multiplier(g, cfg, m.params, x, 0.1), domain_error);
}

TEST_CASE("forward is bitwise deterministic") {
  const ModelConfig cfg = small_config();
  model::NppModel<float> m = model::build_model<float>(cfg, 16);
  const Tensor<float> x = random_input(160);
  Tape<float> g1, g2;
  const model::NppOutput<float> a = model::forward(g1, cfg, m.params, x, 0.1, true);
  const model::NppOutput<float> b = model::forward(g2, cfg, m.params, x, 0.1, true);
  for (int64_t i = 0; i < a.warped.size(); ++i) CHECK(a.warped[i] == b.warped[i]);
  for (int64_t i = 0; i < a.chi.size(); ++i) CHECK(a.chi[i] == b.chi[i]);
}

TEST_CASE("inputs must divide the downsampling factor") {
  const ModelConfig cfg = small_config();  // levels 3: extents must divide 4
  model::NppModel<float> m = model::build_model<float>(cfg, 17);
  Tape<float> g;
  Tensor<float> bad = Tensor<float>::zeros({1, 1, 6, 8, 8});
  CHECK_THROWS_AS(model::forward(g, cfg, m.params, bad, 0.1), shape_error);
  Tensor<float> two_channel = Tensor<float>::zeros({1, 2, 8, 8, 8});
  CHECK_THROWS_AS(model::forward(g, cfg, m.params, two_channel, 0.1), shape_error);
}

}  // TEST_SUITE
