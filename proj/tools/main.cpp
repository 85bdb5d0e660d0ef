#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "config.hpp"
#include "npp/checkpoint.hpp"
#include "npp/dataset.hpp"
#include "npp/errors.hpp"
#include "npp/evaluate.hpp"
#include "npp/grad_suite.hpp"
#include "npp/metrics.hpp"
#include "npp/model.hpp"
#include "npp/spatial.hpp"
#include "npp/training.hpp"
#include "npp/volume.hpp"
#include "run_manifest.hpp"

namespace npp::cli {
namespace {

namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct SynthOpts {
  std::string out;
  std::string config;
  int64_t count = 10;
  uint64_t seed = 1;
};

struct TrainOpts {
  std::string out;
  std::string config;
  std::string resume;
};

struct PreprocessOpts {
  std::string in;
  std::string checkpoint;
  std::string out;
  double lambda = 0.1;
  bool no_spatial_norm = false;
  bool no_strip = false;
  bool emit_mask = false;
};

struct EvaluateOpts {
  std::string checkpoint;
  std::string manifest;
  std::string out;
  std::vector<double> lambdas{0.1};
};

struct GradcheckOpts {
  std::string out = ".";
  int scale = 1;
};

io::Volume mask_volume(const metrics::BinaryMask& m) {
  io::Volume v = io::make_volume(m.dims, 0.0f, m.voxel_size);
  for (size_t i = 0; i < m.bits.size(); ++i) v.data[i] = m.bits[i] ? 1.0f : 0.0f;
  return v;
}

int run_synth(const SynthOpts& o) {
  Stopwatch sw;
  phantom::PhantomSpec spec;
  uint64_t chash = 0;
  if (!o.config.empty()) {
    Config c = Config::parse_file(o.config);
    spec = phantom_spec_from(c);
    c.require_consumed();
    chash = c.content_hash();
  }
  const fs::path out(o.out);
  const dataset::Manifest man = dataset::synth_dataset(spec, o.count, o.seed, out);

  RunManifest rm;
  rm.command = "synth";
  rm.config_hash = chash;
  rm.seed = o.seed;
  if (!o.config.empty()) rm.inputs.push_back(o.config);
  rm.outputs.push_back(out / "manifest.txt");
  for (const dataset::Entry& e : man.entries)
    for (const char* name : {"x.nii", "x_gt.nii", "bias_gt.nii", "mask_gt.nii", "mask_in_x.nii"})
      rm.outputs.push_back(out / e.dir / name);
  rm.duration_ms = sw.elapsed_ms();
  write_run_manifest(rm, out / "run_manifest.txt");
  std::printf("synth: wrote %zu samples to %s\n", man.entries.size(), o.out.c_str());
  return kExitOk;
}

int run_train(const TrainOpts& o) {
  Stopwatch sw;
  Config c = Config::parse_file(o.config);
  const model::ModelConfig mcfg = model_config_from(c);
  const training::TrainConfig tcfg = train_config_from(c);
  const fs::path manifest_path = c.resolve(c.get_string_required("data.manifest"));
  c.require_consumed();

  const dataset::Manifest man = dataset::read_manifest(manifest_path);
  model::NppModel<float> m = model::build_model<float>(mcfg, tcfg.seed);

  const fs::path out(o.out);
  fs::create_directories(out);
  training::TrainPaths paths;
  paths.data_root = manifest_path.parent_path();
  paths.log_path = out / "train_log.txt";
  paths.checkpoint_path = out / "model.ckpt";

  std::optional<fs::path> resume;
  if (!o.resume.empty()) resume = fs::path(o.resume);
  const training::TrainResult res = training::train(m, man, tcfg, paths, resume);

  RunManifest rm;
  rm.command = "train";
  rm.config_hash = c.content_hash();
  rm.seed = tcfg.seed;
  rm.inputs = {o.config, manifest_path.string()};
  rm.outputs = {paths.checkpoint_path, paths.log_path};
  rm.duration_ms = sw.elapsed_ms();
  write_run_manifest(rm, out / "run_manifest.txt");
  std::printf("train: %lld steps (%lld skipped), epoch-mean total %.6g -> %.6g\n",
              static_cast<long long>(res.steps), static_cast<long long>(res.skipped_steps),
              res.first_epoch_mean_total, res.last_epoch_mean_total);
  return kExitOk;
}

int run_preprocess(const PreprocessOpts& o) {
  Stopwatch sw;
  if (o.lambda < 1e-3 || o.lambda > 10.0)
    std::fprintf(stderr,
                 "warning: lambda %.4g lies outside the trained range [0.001, 10]; "
                 "the conditioning network is extrapolating\n",
                 o.lambda);

  const training::Checkpoint ck = training::load_checkpoint(o.checkpoint);
  model::NppModel<float> m;
  m.config = ck.model_config;
  m.params = ck.params;

  const io::Volume raw = io::read_nifti(o.in);
  const io::Volume conf = io::conform(raw, ck.grid_dims, {1, 1, 1});
  const evaluate::EvalPrediction pred = evaluate::run_model(m, conf, o.lambda);
  const metrics::BinaryMask mask = metrics::brain_mask_from_output(pred.translated);

  const fs::path out(o.out);
  fs::create_directories(out);
  RunManifest rm;
  rm.command = "preprocess";
  rm.seed = 0;
  rm.inputs = {o.in, o.checkpoint};

  io::Volume native = pred.translated;
  if (!o.no_strip)
    for (size_t i = 0; i < native.data.size(); ++i)
      if (!mask.bits[i]) native.data[i] = 0.0f;
  io::write_nifti(native, out / "stripped.nii");
  rm.outputs.push_back(out / "stripped.nii");

  if (pred.has_chi) {
    io::write_nifti(pred.chi_full, out / "chi.nii");
    rm.outputs.push_back(out / "chi.nii");
  } else {
    std::fprintf(stderr, "note: checkpoint has no multiplier field, chi.nii not written\n");
  }

  if (!o.no_spatial_norm) {
    io::write_nifti(pred.warped, out / "atlas.nii");
    rm.outputs.push_back(out / "atlas.nii");
    spatial::write_affine_sidecar(out / "affine.txt", pred.phi, ck.grid_dims, ck.grid_dims);
    rm.outputs.push_back(out / "affine.txt");
  }

  if (o.emit_mask) {
    io::write_nifti(mask_volume(mask), out / "mask.nii");
    rm.outputs.push_back(out / "mask.nii");
  }

  rm.duration_ms = sw.elapsed_ms();
  write_run_manifest(rm, out / "run_manifest.txt");
  std::printf("preprocess: wrote %zu files to %s\n", rm.outputs.size(), o.out.c_str());
  return kExitOk;
}

int run_evaluate(const EvaluateOpts& o) {
  Stopwatch sw;
  const training::Checkpoint ck = training::load_checkpoint(o.checkpoint);
  model::NppModel<float> m;
  m.config = ck.model_config;
  m.params = ck.params;

  const fs::path manifest_path(o.manifest);
  const dataset::Manifest man = dataset::read_manifest(manifest_path);
  const fs::path root = manifest_path.parent_path();

  std::vector<std::vector<evaluate::EvalRow>> rows(o.lambdas.size());
  for (size_t li = 0; li < o.lambdas.size(); ++li) {
    for (size_t si = 0; si < man.entries.size(); ++si) {
      phantom::PhantomSample s;
      try {
        s = dataset::load_sample(man, si, root);
      } catch (const npp::error& e) {
        std::fprintf(stderr, "warning: skipping sample %zu: %s\n", si, e.what());
        continue;
      }
      const evaluate::EvalPrediction pred = evaluate::run_model(m, s.x, o.lambdas[li]);
      rows[li].push_back(evaluate::evaluate_sample(s, pred));
    }
  }

  const fs::path out(o.out);
  fs::create_directories(out);
  evaluate::write_report(out / "report.txt", o.lambdas, rows);

  RunManifest rm;
  rm.command = "evaluate";
  rm.seed = 0;
  rm.inputs = {o.checkpoint, o.manifest};
  rm.outputs = {out / "report.txt"};
  rm.duration_ms = sw.elapsed_ms();
  write_run_manifest(rm, out / "run_manifest.txt");
  std::printf("evaluate: %zu lambdas x %zu samples -> %s\n", o.lambdas.size(),
              man.entries.size(), (out / "report.txt").string().c_str());
  return kExitOk;
}

int run_gradcheck(const GradcheckOpts& o) {
  Stopwatch sw;
  const std::vector<verify::SuiteResult> results = verify::gradcheck_suite(o.scale);

  const fs::path out(o.out);
  fs::create_directories(out);
  std::FILE* rep = std::fopen((out / "gradcheck.txt").string().c_str(), "w");
  if (!rep) throw io_error("cannot write gradcheck report");
  for (const verify::SuiteResult& r : results) {
    const char* tag = r.report.pass ? "ok  " : "FAIL";
    std::printf("%s %-18s checked %5lld  max_rel_err %.3e  (tol %.0e)\n", tag, r.name.c_str(),
                static_cast<long long>(r.report.checked), r.report.max_rel_err, r.report.tol);
    std::fprintf(rep, "%s %s checked %lld max_rel_err %.17g tol %.3g\n", tag, r.name.c_str(),
                 static_cast<long long>(r.report.checked), r.report.max_rel_err, r.report.tol);
    if (!r.report.pass)
      std::printf("     worst: %s[%lld] analytic %.9g numeric %.9g\n", r.report.worst.param.c_str(),
                  static_cast<long long>(r.report.worst.index), r.report.worst.analytic,
                  r.report.worst.numeric);
  }
  std::fclose(rep);

  RunManifest rm;
  rm.command = "gradcheck";
  rm.seed = 0;
  rm.outputs = {out / "gradcheck.txt"};
  rm.duration_ms = sw.elapsed_ms();
  write_run_manifest(rm, out / "run_manifest.txt");
  return verify::suite_passed(results) ? kExitOk : kExitNumeric;
}

}  // namespace
}  // namespace npp::cli

int main(int argc, char** argv) {
  using namespace npp::cli;

  CLI::App app{"head-volume pre-processing: joint skull-stripping, intensity\n"
               "normalization and affine spatial normalization"};
  app.require_subcommand(1);

  SynthOpts so;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic supervised dataset");
  synth->add_option("--out", so.out, "output directory")->envname("NPP_OUT")->required();
  synth->add_option("--count", so.count, "number of samples")->check(CLI::PositiveNumber);
  synth->add_option("--seed", so.seed, "seed of the first sample")->envname("NPP_SEED");
  synth->add_option("--config", so.config, "config file with a [phantom] section");

  TrainOpts to;
  CLI::App* train = app.add_subcommand("train", "optimize a model on a synthesized dataset");
  train->add_option("--config", to.config, "config file ([model], [train], [data])")->required();
  train->add_option("--out", to.out, "output directory")->envname("NPP_OUT")->required();
  train->add_option("--resume", to.resume, "checkpoint to continue from");

  PreprocessOpts po;
  CLI::App* prep = app.add_subcommand("preprocess", "run the model on one volume");
  prep->add_option("--in", po.in, "input NIfTI volume")->required();
  prep->add_option("--checkpoint", po.checkpoint, "trained model checkpoint")->required();
  prep->add_option("--lambda", po.lambda, "field-smoothness conditioning weight (default 0.1)");
  prep->add_option("--out", po.out, "output directory")->envname("NPP_OUT")->required();
  prep->add_flag("--no-spatial-norm", po.no_spatial_norm,
                 "skip the affine head: native-space outputs only");
  prep->add_flag("--no-strip", po.no_strip,
                 "write the raw multiplier product without masking non-brain voxels");
  prep->add_flag("--emit-mask", po.emit_mask, "also write the binary brain mask");

  EvaluateOpts eo;
  CLI::App* eval = app.add_subcommand("evaluate", "score a checkpoint against ground truth");
  eval->add_option("--checkpoint", eo.checkpoint, "trained model checkpoint")->required();
  eval->add_option("--manifest", eo.manifest, "test dataset manifest")->required();
  eval->add_option("--lambdas", eo.lambdas, "comma-separated conditioning weights")
      ->delimiter(',');
  eval->add_option("--out", eo.out, "output directory")->envname("NPP_OUT")->required();

  GradcheckOpts go;
  CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  grad->add_option("--scale", go.scale, "tensor extent multiplier")->check(CLI::PositiveNumber);
  grad->add_option("--out", go.out, "report directory (default: current)")->envname("NPP_OUT");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*synth) return run_synth(so);
    if (*train) return run_train(to);
    if (*prep) return run_preprocess(po);
    if (*eval) return run_evaluate(eo);
    if (*grad) return run_gradcheck(go);
  } catch (const npp::numeric_error& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const npp::invalid_affine_error& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const npp::error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  }
  return kExitUsage;
}
