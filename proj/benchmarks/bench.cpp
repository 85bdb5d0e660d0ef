// Microbenchmarks for the hot paths: convolution, attention, resampling,
// the SSIM objective, a full optimization step and phantom synthesis.
// Sizes mirror the small desk configuration so numbers stay comparable
// across machines without long runs.

#include <benchmark/benchmark.h>

#include <array>
#include <map>
#include <vector>

#include "npp/losses.hpp"
#include "npp/model.hpp"
#include "npp/nn_ops.hpp"
#include "npp/phantom.hpp"
#include "npp/rng.hpp"
#include "npp/spatial.hpp"
#include "npp/training.hpp"
#include "npp/volume.hpp"

using namespace npp;

namespace {

ad::Tensor<float> random_tensor(ad::Shape shape, uint64_t seed) {
  ad::Tensor<float> t = ad::Tensor<float>::zeros(std::move(shape));
  Rng rng(seed);
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

model::ModelConfig small_config() {
  model::ModelConfig mc;
  mc.levels = 3;
  mc.base_channels = 8;
  mc.heads = 4;
  mc.bottleneck_blocks = 2;
  mc.hyper_hidden = {32, 32};
  return mc;
}

void bm_conv3d_forward(benchmark::State& state) {
  const int64_t c = state.range(0);
  const ad::Tensor<float> x = random_tensor({1, c, 16, 16, 16}, 1);
  const ad::Tensor<float> w = random_tensor({c, c, 3, 3, 3}, 2);
  const ad::Tensor<float> b = random_tensor({c}, 3);
  for (auto _ : state) {
    ad::Tape<float> g;
    benchmark::DoNotOptimize(ad::conv3d(g, x, w, b, 1, 1));
  }
}
BENCHMARK(bm_conv3d_forward)->Arg(8)->Arg(16);

void bm_conv3d_train(benchmark::State& state) {
  const int64_t c = state.range(0);
  const ad::Tensor<float> x = random_tensor({1, c, 16, 16, 16}, 1);
  for (auto _ : state) {
    ad::Tape<float> g;
    const ad::Tensor<float> w = g.watch(random_tensor({c, c, 3, 3, 3}, 2));
    const ad::Tensor<float> b = g.watch(random_tensor({c}, 3));
    ad::Tensor<float> y = ad::conv3d(g, x, w, b, 1, 1);
    ad::Tensor<float> loss = ad::mean_all(g, ad::mul(g, y, y));
    g.backward(loss);
    benchmark::DoNotOptimize(g.grad(w));
  }
}
BENCHMARK(bm_conv3d_train)->Arg(8);

void bm_attention_block(benchmark::State& state) {
  const model::ModelConfig mc = small_config();
  model::NppModel<float> m = model::build_model<float>(mc, 5);
  const int64_t tokens = 8 * 8 * 8;  // 32^3 input pooled twice
  const ad::Tensor<float> x = random_tensor({tokens, mc.embed_dim()}, 7);
  const ad::ParamSlice<float> blk{&m.params, "bott.b0."};
  for (auto _ : state) {
    ad::Tape<float> g;
    benchmark::DoNotOptimize(ad::attention_block(g, x, mc.heads, blk));
  }
}
BENCHMARK(bm_attention_block);

void bm_trilinear_sample(benchmark::State& state) {
  const int64_t s = state.range(0);
  const ad::Tensor<float> x = random_tensor({1, 1, s, s, s}, 9);
  spatial::AffineTransform phi;
  phi.A = {0.95, 0.02, 0.0, -0.02, 1.01, 0.03, 0.0, -0.01, 0.97};
  phi.t = {0.05, -0.03, 0.02};
  const spatial::SamplingGrid<float> grid = spatial::affine_grid<float>(phi, {s, s, s});
  for (auto _ : state) {
    ad::Tape<float> g;
    benchmark::DoNotOptimize(spatial::trilinear_sample(g, x, grid));
  }
}
BENCHMARK(bm_trilinear_sample)->Arg(32)->Arg(64);

void bm_ssim_loss_train(benchmark::State& state) {
  const int64_t s = state.range(0);
  const ad::Tensor<float> a = random_tensor({1, 1, s, s, s}, 11);
  const ad::Tensor<float> b = random_tensor({1, 1, s, s, s}, 12);
  for (auto _ : state) {
    ad::Tape<float> g;
    const ad::Tensor<float> at = g.watch(a);
    ad::Tensor<float> loss = losses::ssim_loss(g, at, b);
    g.backward(loss);
    benchmark::DoNotOptimize(g.grad(at));
  }
}
BENCHMARK(bm_ssim_loss_train)->Arg(32);

void bm_model_forward(benchmark::State& state) {
  const model::ModelConfig mc = small_config();
  const model::NppModel<float> m = model::build_model<float>(mc, 13);
  phantom::PhantomSpec spec;  // 32^3
  const phantom::PhantomSample sample = phantom::generate_phantom(spec, 200);
  const ad::Tensor<float> x = io::to_tensor<float>(sample.x);
  for (auto _ : state) {
    ad::Tape<float> g;
    benchmark::DoNotOptimize(model::forward(g, m.config, m.params, x, 0.1));
  }
}
BENCHMARK(bm_model_forward);

void bm_training_step(benchmark::State& state) {
  const model::ModelConfig mc = small_config();
  model::NppModel<float> m = model::build_model<float>(mc, 17);
  phantom::PhantomSpec spec;  // 32^3
  const phantom::PhantomSample sample = phantom::generate_phantom(spec, 300);
  const ad::Tensor<float> x = io::to_tensor<float>(sample.x);
  const ad::Tensor<float> gt = io::to_tensor<float>(sample.x_gt);

  training::TrainConfig tc;
  training::OptState opt;
  for (auto _ : state) {
    ad::Tape<float> g;
    const ad::ParamStore<float> watched = m.params.watch_all(g);
    model::NppOutput<float> out = model::forward(g, m.config, watched, x, 0.1);
    losses::Objective<float> obj = losses::npp_objective(g, out, gt, 0.1);
    g.backward(obj.total);
    std::map<std::string, std::vector<float>> grads;
    for (const auto& [name, t] : watched) grads[name] = g.grad(t);
    training::adam_step(m.params, grads, opt, 1e-3, tc);
  }
}
BENCHMARK(bm_training_step);

void bm_phantom_generation(benchmark::State& state) {
  phantom::PhantomSpec spec;  // 32^3
  uint64_t seed = 1000;
  for (auto _ : state) {
    benchmark::DoNotOptimize(phantom::generate_phantom(spec, seed++));
  }
}
BENCHMARK(bm_phantom_generation);

}  // namespace

BENCHMARK_MAIN();
