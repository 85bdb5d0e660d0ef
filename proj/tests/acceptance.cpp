// Acceptance gate: one self-contained check per shipping requirement,
// printed as exactly one PASS/FAIL line each. The process exits nonzero
// when any selected check fails. `--only N` restricts the run to a single
// check (the end-to-end training artifacts are built on demand and shared
// between checks 3 and 4).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "npp/checkpoint.hpp"
#include "npp/dataset.hpp"
#include "npp/errors.hpp"
#include "npp/evaluate.hpp"
#include "npp/grad_suite.hpp"
#include "npp/losses.hpp"
#include "npp/metrics.hpp"
#include "npp/model.hpp"
#include "npp/phantom.hpp"
#include "npp/rng.hpp"
#include "npp/spatial.hpp"
#include "npp/training.hpp"
#include "npp/volume.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace npp;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string strf(const char* fmt, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, fmt);
  std::vsnprintf(buf, sizeof buf, fmt, ap);
  va_end(ap);
  return buf;
}

void note(const std::string& msg) {
  std::fprintf(stderr, "  [%s]\n", msg.c_str());
  std::fflush(stderr);
}

fs::path scratch_root(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("npp_accept_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

double mean_of(const std::vector<evaluate::EvalRow>& rows, double evaluate::EvalRow::*member) {
  std::vector<double> vals;
  vals.reserve(rows.size());
  for (const evaluate::EvalRow& r : rows) vals.push_back(r.*member);
  return evaluate::aggregate(vals).mean;
}

double median_of(const std::vector<evaluate::EvalRow>& rows, double evaluate::EvalRow::*member) {
  std::vector<double> vals;
  for (const evaluate::EvalRow& r : rows) {
    const double v = r.*member;
    if (!std::isnan(v)) vals.push_back(v);
  }
  std::sort(vals.begin(), vals.end());
  const size_t n = vals.size();
  if (n == 0) return std::numeric_limits<double>::quiet_NaN();
  return n % 2 ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
}

std::vector<evaluate::EvalRow> eval_rows(const model::NppModel<float>& m,
                                         const dataset::Manifest& man, const fs::path& root,
                                         double lambda) {
  std::vector<evaluate::EvalRow> rows;
  rows.reserve(man.entries.size());
  for (size_t i = 0; i < man.entries.size(); ++i) {
    const phantom::PhantomSample s = dataset::load_sample(man, i, root);
    rows.push_back(evaluate::evaluate_sample(s, evaluate::run_model(m, s.x, lambda)));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// 1. Finite-difference gradient verification, double precision.

Outcome check_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<verify::SuiteResult> results = verify::gradcheck_suite(1);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  bool pass = verify::suite_passed(results) && secs < 120.0;
  double worst = 0.0;
  std::string worst_name = "-";
  for (const verify::SuiteResult& r : results) {
    if (r.report.max_rel_err > worst) {
      worst = r.report.max_rel_err;
      worst_name = r.name;
    }
    if (!r.report.pass) pass = false;
  }
  return {pass, strf("%zu suites, worst rel err %.3g (%s), %.1f s", results.size(), worst,
                     worst_name.c_str(), secs)};
}

// ---------------------------------------------------------------------------
// 2. Exact identities of the building blocks.

Outcome check_identities() {
  bool pass = true;
  std::string fail;
  auto expect = [&](bool ok, const char* what) {
    if (!ok && pass) {
      pass = false;
      fail = what;
    }
  };

  phantom::PhantomSpec spec;
  spec.dims = {16, 16, 16};
  const phantom::PhantomSample s = phantom::generate_phantom(spec, 77);

  // Self-similarity is exactly one.
  expect(metrics::ssim_metric(s.x, s.x) == 1.0, "ssim(x,x) != 1");

  // Total variation of a constant field is exactly zero.
  {
    ad::Tape<float> g;
    ad::Tensor<float> c = ad::Tensor<float>::zeros({1, 1, 8, 8, 8});
    for (int64_t i = 0; i < c.size(); ++i) c[i] = 0.37f;
    expect(losses::tv_loss(g, c).scalar() == 0.0f, "tv(const) != 0");
  }

  // Positive homogeneity of total variation to 1e-12 relative.
  {
    ad::Tape<double> g;
    Rng rng(5);
    ad::Tensor<double> x = ad::Tensor<double>::zeros({1, 1, 6, 7, 8});
    for (int64_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-2.0, 2.0);
    const double k = 3.77;
    ad::Tensor<double> kx = ad::Tensor<double>::zeros({1, 1, 6, 7, 8});
    for (int64_t i = 0; i < x.size(); ++i) kx[i] = k * x[i];
    const double a = losses::tv_loss(g, kx).scalar();
    const double b = k * losses::tv_loss(g, x).scalar();
    expect(std::abs(a - b) <= 1e-12 * std::abs(b), "tv homogeneity > 1e-12");
  }

  // Resampling through the identity transform reproduces the input.
  {
    ad::Tape<float> g;
    const ad::Tensor<float> x = io::to_tensor<float>(s.x);
    const spatial::SamplingGrid<float> grid =
        spatial::affine_grid<float>(spatial::AffineTransform::identity(), {16, 16, 16});
    const ad::Tensor<float> y = spatial::trilinear_sample(g, x, grid);
    float max_err = 0.0f;
    for (int64_t i = 0; i < x.size(); ++i) max_err = std::max(max_err, std::abs(y[i] - x[i]));
    expect(max_err <= 1e-6f, "identity resample err > 1e-6");
  }

  // The translated output is the voxelwise product with the upsampled
  // multiplier on every forward pass, and a fresh pose head is the exact
  // identity transform.
  {
    model::ModelConfig mc;
    mc.levels = 3;
    mc.base_channels = 4;
    mc.heads = 2;
    mc.bottleneck_blocks = 1;
    mc.hyper_hidden = {8};
    model::NppModel<float> m = model::build_model<float>(mc, 21);

    const evaluate::EvalPrediction p0 = evaluate::run_model(m, s.x, 0.1);
    expect(p0.phi.A == spatial::AffineTransform::identity().A &&
               p0.phi.t == spatial::AffineTransform::identity().t,
           "fresh pose head is not the identity");

    Rng noise(99);
    for (auto& [name, t] : m.params)
      for (int64_t i = 0; i < t.size(); ++i)
        t[i] += static_cast<float>(noise.uniform(-0.05, 0.05));

    for (double lam : {0.001, 0.1, 10.0}) {
      const evaluate::EvalPrediction p = evaluate::run_model(m, s.x, lam);
      expect(p.has_chi, "multiplier missing");
      for (size_t i = 0; i < s.x.data.size() && pass; ++i)
        expect(p.translated.data[i] == p.chi_full.data[i] * s.x.data[i],
               "translated != chi * x");
    }
  }

  return {pass, pass ? "ssim/tv/resample/product/pose identities all exact" : fail};
}

// ---------------------------------------------------------------------------
// 3 + 4. Desk-scale end-to-end training, shared between two checks.

struct E2eArtifacts {
  fs::path root;
  model::NppModel<float> model;
  dataset::Manifest test_man;
  std::map<double, std::vector<evaluate::EvalRow>> rows;
};

const E2eArtifacts& ensure_e2e() {
  static std::optional<E2eArtifacts> cache;
  if (cache) return *cache;

  E2eArtifacts a;
  a.root = scratch_root("e2e");
  phantom::PhantomSpec spec;  // 32^3 defaults

  note("synthesizing 200 training + 20 held-out phantoms at 32^3");
  const dataset::Manifest train_man = dataset::synth_dataset(spec, 200, 1000, a.root / "train");
  a.test_man = dataset::synth_dataset(spec, 20, 5000, a.root / "test");

  model::ModelConfig mc;
  mc.levels = 3;
  mc.base_channels = 8;
  mc.heads = 4;
  mc.bottleneck_blocks = 2;
  mc.hyper_hidden = {32, 32};

  training::TrainConfig tc;
  tc.lr0 = 1e-3;
  tc.max_epochs = 40;
  tc.halve_epoch = 20;
  tc.batch_size = 2;
  tc.seed = 42;
  tc.checkpoint_every = 10;

  a.model = model::build_model<float>(mc, tc.seed);
  training::TrainPaths paths{a.root / "train", a.root / "run" / "train_log.txt",
                             a.root / "run" / "model.ckpt"};
  fs::create_directories(a.root / "run");
  note("training 40 epochs x 100 steps on one core (roughly an hour)");
  training::train(a.model, train_man, tc, paths);

  note("evaluating 20 held-out phantoms at lambda 0.001 / 0.1 / 10");
  for (double lam : {0.001, 0.1, 10.0})
    a.rows[lam] = eval_rows(a.model, a.test_man, a.root / "test", lam);

  cache = std::move(a);
  return *cache;
}

Outcome check_desk_training() {
  const E2eArtifacts& a = ensure_e2e();
  const std::vector<evaluate::EvalRow>& rows = a.rows.at(0.1);
  const double dice = mean_of(rows, &evaluate::EvalRow::dice);
  const double rec = mean_of(rows, &evaluate::EvalRow::rec_ssim);
  const double bias = mean_of(rows, &evaluate::EvalRow::bias_ssim);
  const double aff = mean_of(rows, &evaluate::EvalRow::affine_err_vox);
  const bool pass = dice >= 0.90 && rec >= 0.95 && bias >= 0.90 && aff <= 2.0;
  return {pass, strf("dice %.4f (>=0.90), rec ssim %.4f (>=0.95), bias ssim %.4f (>=0.90), "
                     "affine err %.3f vox (<=2.0)",
                     dice, rec, bias, aff)};
}

Outcome check_lambda_conditioning() {
  const E2eArtifacts& a = ensure_e2e();
  const double rec_lo = mean_of(a.rows.at(0.001), &evaluate::EvalRow::rec_ssim);
  const double rec_mid = mean_of(a.rows.at(0.1), &evaluate::EvalRow::rec_ssim);
  const double rec_hi = mean_of(a.rows.at(10.0), &evaluate::EvalRow::rec_ssim);
  const double tv_lo = median_of(a.rows.at(0.001), &evaluate::EvalRow::tv_chi);
  const double tv_mid = median_of(a.rows.at(0.1), &evaluate::EvalRow::tv_chi);
  const double tv_hi = median_of(a.rows.at(10.0), &evaluate::EvalRow::tv_chi);
  const bool pass = rec_hi < rec_mid && tv_lo >= tv_mid && tv_mid >= tv_hi;
  return {pass, strf("rec ssim %.4f/%.4f/%.4f, median tv %.4g/%.4g/%.4g at lambda "
                     "0.001/0.1/10",
                     rec_lo, rec_mid, rec_hi, tv_lo, tv_mid, tv_hi)};
}

// ---------------------------------------------------------------------------
// 5. Removing the multiplier field costs bias-recovery quality under an
// otherwise identical training budget.

Outcome check_multiplier_ablation() {
  const fs::path root = scratch_root("ablation");
  phantom::PhantomSpec spec;
  spec.dims = {16, 16, 16};
  note("ablation: synthesizing 40 training + 8 held-out phantoms at 16^3");
  const dataset::Manifest train_man = dataset::synth_dataset(spec, 40, 3000, root / "train");
  const dataset::Manifest test_man = dataset::synth_dataset(spec, 8, 7000, root / "test");

  auto run_mode = [&](model::Mode mode, uint64_t seed) {
    model::ModelConfig mc;
    mc.levels = 3;
    mc.base_channels = 4;
    mc.heads = 2;
    mc.bottleneck_blocks = 1;
    mc.hyper_hidden = {16};
    mc.mode = mode;

    training::TrainConfig tc;
    tc.lr0 = 1e-3;
    tc.max_epochs = 12;
    tc.halve_epoch = 6;
    tc.batch_size = 2;
    tc.seed = seed;
    tc.checkpoint_every = 12;

    model::NppModel<float> m = model::build_model<float>(mc, seed);
    const fs::path run = root / (to_string(mode) + "_" + std::to_string(seed));
    fs::create_directories(run);
    training::TrainPaths paths{root / "train", run / "train_log.txt", run / "model.ckpt"};
    training::train(m, train_man, tc, paths);
    return mean_of(eval_rows(m, test_man, root / "test", 0.1), &evaluate::EvalRow::bias_ssim);
  };

  double mult_sum = 0.0, direct_sum = 0.0;
  std::string per_seed;
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    note(strf("ablation: training both modes with seed %llu",
              static_cast<unsigned long long>(seed)));
    const double mu = run_mode(model::Mode::multiplier, seed);
    const double di = run_mode(model::Mode::direct, seed);
    mult_sum += mu;
    direct_sum += di;
    per_seed += strf(" [seed %llu: %.4f vs %.4f]", static_cast<unsigned long long>(seed), mu, di);
  }
  const double mult = mult_sum / 3.0, direct = direct_sum / 3.0;
  return {direct < mult, strf("bias ssim multiplier %.4f vs direct %.4f over 3 seeds%s", mult,
                              direct, per_seed.c_str())};
}

// ---------------------------------------------------------------------------
// 6. Overlap and surface metrics against an exhaustive reference.

struct BruteSurface {
  double msd = 0, rmsd = 0, hd = 0;
};

std::vector<std::array<int64_t, 3>> brute_surface(const metrics::BinaryMask& m) {
  std::vector<std::array<int64_t, 3>> out;
  const auto [nx, ny, nz] = m.dims;
  auto inside = [&](int64_t i, int64_t j, int64_t k) {
    return i >= 0 && j >= 0 && k >= 0 && i < nx && j < ny && k < nz && m.at(i, j, k);
  };
  for (int64_t k = 0; k < nz; ++k)
    for (int64_t j = 0; j < ny; ++j)
      for (int64_t i = 0; i < nx; ++i) {
        if (!m.at(i, j, k)) continue;
        if (!inside(i - 1, j, k) || !inside(i + 1, j, k) || !inside(i, j - 1, k) ||
            !inside(i, j + 1, k) || !inside(i, j, k - 1) || !inside(i, j, k + 1))
          out.push_back({i, j, k});
      }
  return out;
}

BruteSurface brute_surface_stats(const metrics::BinaryMask& a, const metrics::BinaryMask& b) {
  const std::vector<std::array<int64_t, 3>> sa = brute_surface(a);
  const std::vector<std::array<int64_t, 3>> sb = brute_surface(b);
  const std::array<double, 3> vs = a.voxel_size;
  auto nearest = [&](const std::array<int64_t, 3>& p,
                     const std::vector<std::array<int64_t, 3>>& surf) {
    double best = std::numeric_limits<double>::infinity();
    for (const std::array<int64_t, 3>& q : surf) {
      const double dx = static_cast<double>(p[0] - q[0]) * vs[0];
      const double dy = static_cast<double>(p[1] - q[1]) * vs[1];
      const double dz = static_cast<double>(p[2] - q[2]) * vs[2];
      best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
    }
    return best;
  };
  BruteSurface s;
  double sum = 0, sq = 0;
  int64_t n = 0;
  for (const auto& p : sa) {
    const double d = nearest(p, sb);
    sum += d;
    sq += d * d;
    s.hd = std::max(s.hd, d);
    ++n;
  }
  for (const auto& p : sb) {
    const double d = nearest(p, sa);
    sum += d;
    sq += d * d;
    s.hd = std::max(s.hd, d);
    ++n;
  }
  s.msd = sum / static_cast<double>(n);
  s.rmsd = std::sqrt(sq / static_cast<double>(n));
  return s;
}

Outcome check_metric_oracle() {
  double worst_dist = 0.0;
  for (int c = 0; c < 100; ++c) {
    Rng rng(static_cast<uint64_t>(c) * 7919 + 3);
    metrics::BinaryMask a, b;
    a.dims = b.dims = {8, 8, 8};
    if (c % 2) a.voxel_size = b.voxel_size = {1.0, 1.3, 0.8};
    const double pa = rng.uniform(0.2, 0.8), pb = rng.uniform(0.2, 0.8);
    a.bits.resize(512);
    b.bits.resize(512);
    for (int i = 0; i < 512; ++i) {
      a.bits[static_cast<size_t>(i)] = rng.uniform(0.0, 1.0) < pa;
      b.bits[static_cast<size_t>(i)] = rng.uniform(0.0, 1.0) < pb;
    }
    if (a.count() == 0 || b.count() == 0) continue;

    // Exhaustive overlap counts.
    int64_t inter = 0, tp = 0, fn = 0, tn = 0, fp = 0;
    for (int i = 0; i < 512; ++i) {
      const bool va = a.bits[static_cast<size_t>(i)], vb = b.bits[static_cast<size_t>(i)];
      inter += va && vb;
      tp += va && vb;
      fn += !va && vb;
      tn += !va && !vb;
      fp += va && !vb;
    }
    const double want_dice =
        2.0 * static_cast<double>(inter) / static_cast<double>(a.count() + b.count());
    if (metrics::dice(a, b) != want_dice) return {false, strf("dice mismatch on case %d", c)};
    const metrics::SensSpec ss = metrics::sens_spec(a, b);
    if (ss.sens != static_cast<double>(tp) / static_cast<double>(tp + fn) ||
        ss.spec != static_cast<double>(tn) / static_cast<double>(tn + fp))
      return {false, strf("sens/spec mismatch on case %d", c)};

    const metrics::SurfaceStats got = metrics::surface_distances(a, b);
    const BruteSurface want = brute_surface_stats(a, b);
    const double err = std::max({std::abs(got.msd - want.msd), std::abs(got.rmsd - want.rmsd),
                                 std::abs(got.hd - want.hd)});
    worst_dist = std::max(worst_dist, err);
    if (err > 1e-9) return {false, strf("surface distance off by %.3g on case %d", err, c)};
  }
  return {true, strf("100 mask pairs, overlaps exact, surface distances within %.3g", worst_dist)};
}

// ---------------------------------------------------------------------------
// 7. Bit-identical reruns: logs, checkpoints and output volumes.

Outcome check_determinism() {
  const fs::path root = scratch_root("determinism");
  phantom::PhantomSpec spec;
  spec.dims = {16, 16, 16};
  const dataset::Manifest man = dataset::synth_dataset(spec, 4, 9000, root / "data");

  model::ModelConfig mc;
  mc.levels = 2;
  mc.base_channels = 4;
  mc.heads = 2;
  mc.bottleneck_blocks = 1;
  mc.hyper_hidden = {8};
  training::TrainConfig tc;
  tc.lr0 = 1e-3;
  tc.max_epochs = 2;
  tc.halve_epoch = 1;
  tc.batch_size = 2;
  tc.seed = 7;
  tc.checkpoint_every = 2;

  for (const char* run : {"r1", "r2"}) {
    fs::create_directories(root / run);
    model::NppModel<float> m = model::build_model<float>(mc, tc.seed);
    training::TrainPaths paths{root / "data", root / run / "train_log.txt",
                               root / run / "model.ckpt"};
    training::train(m, man, tc, paths);
  }
  if (!test::files_equal(root / "r1" / "train_log.txt", root / "r2" / "train_log.txt"))
    return {false, "training logs differ between identical runs"};
  if (!test::files_equal(root / "r1" / "model.ckpt", root / "r2" / "model.ckpt"))
    return {false, "checkpoints differ between identical runs"};

  // Identical checkpoints must produce identical output volumes.
  const phantom::PhantomSample probe = phantom::generate_phantom(spec, 9100);
  for (const char* run : {"r1", "r2"}) {
    const training::Checkpoint ck = training::load_checkpoint(root / run / "model.ckpt");
    model::NppModel<float> m;
    m.config = ck.model_config;
    m.params = ck.params;
    const evaluate::EvalPrediction p = evaluate::run_model(m, probe.x, 0.1);
    io::write_nifti(p.translated, root / run / "translated.nii");
    io::write_nifti(p.warped, root / run / "warped.nii");
  }
  if (!test::files_equal(root / "r1" / "translated.nii", root / "r2" / "translated.nii") ||
      !test::files_equal(root / "r1" / "warped.nii", root / "r2" / "warped.nii"))
    return {false, "preprocessed volumes differ between identical runs"};
  return {true, "log, checkpoint and output volumes byte-identical across reruns"};
}

// ---------------------------------------------------------------------------
// 8. NIfTI write -> read -> write is byte-stable for randomized volumes.

Outcome check_io_roundtrip() {
  const fs::path root = scratch_root("io");
  for (int c = 0; c < 100; ++c) {
    Rng rng(static_cast<uint64_t>(c) * 2654435761u + 17);
    const std::array<int64_t, 3> dims{rng.uniform_int(14) + 3, rng.uniform_int(14) + 3,
                                      rng.uniform_int(14) + 3};
    const std::array<double, 3> voxel{rng.uniform(0.4, 2.5), rng.uniform(0.4, 2.5),
                                      rng.uniform(0.4, 2.5)};
    io::Volume v = io::make_volume(dims, 0.0f, voxel);
    for (int r = 0; r < 12; ++r)
      v.world_affine[static_cast<size_t>(r)] += rng.uniform(-0.2, 0.2);
    v.world_affine[3] = rng.uniform(-100.0, 100.0);
    v.world_affine[7] = rng.uniform(-100.0, 100.0);
    v.world_affine[11] = rng.uniform(-100.0, 100.0);
    for (float& x : v.data) x = static_cast<float>(rng.uniform(-1000.0, 1000.0));
    if (!v.data.empty()) {
      v.data[0] = 0.0f;
      v.data.back() = -1.0f;
    }

    const fs::path p1 = root / "a.nii", p2 = root / "b.nii";
    io::write_nifti(v, p1);
    const io::Volume back = io::read_nifti(p1);
    io::write_nifti(back, p2);
    if (!test::files_equal(p1, p2))
      return {false, strf("second write differs from first on volume %d", c)};
  }
  return {true, "100 randomized volumes round-trip byte-identically"};
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      only = std::atoi(argv[++i]);
    } else {
      std::fprintf(stderr, "usage: %s [--only N]\n", argv[0]);
      return 2;
    }
  }

  struct Check {
    const char* name;
    Outcome (*fn)();
  };
  const Check checks[] = {
      {"gradient-checks", check_gradients},
      {"exact-identities", check_identities},
      {"desk-training", check_desk_training},
      {"lambda-conditioning", check_lambda_conditioning},
      {"multiplier-ablation", check_multiplier_ablation},
      {"metrics-oracle", check_metric_oracle},
      {"determinism", check_determinism},
      {"nifti-roundtrip", check_io_roundtrip},
  };

  bool all_pass = true;
  for (int i = 0; i < 8; ++i) {
    if (only != 0 && only != i + 1) continue;
    Outcome o;
    try {
      o = checks[i].fn();
    } catch (const std::exception& e) {
      o = {false, strf("exception: %s", e.what())};
    }
    all_pass = all_pass && o.pass;
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, checks[i].name,
                o.detail.c_str());
    std::fflush(stdout);
  }
  return all_pass ? 0 : 1;
}
