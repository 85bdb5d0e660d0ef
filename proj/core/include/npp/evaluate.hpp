#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "npp/model.hpp"
#include "npp/phantom.hpp"

namespace npp::evaluate {

/// Everything the model produces for one input volume, converted to plain
/// volumes for metric computation and file output.
struct EvalPrediction {
  io::Volume translated;  // stripped + intensity-normalized, native grid
  io::Volume warped;      // atlas grid
  io::Volume chi_full;    // multiplier upsampled to the input grid; unset in direct mode
  spatial::AffineTransform phi;  // atlas voxel -> input point sampling map
  bool has_chi = false;
  double tv_chi = 0.0;  // total variation of the native-resolution field
};

/// Inference pass (no gradients) on a single volume.
EvalPrediction run_model(const model::NppModel<float>& m, const io::Volume& x, double lambda);

/// Per-sample metric record. sens/spec may be NaN when undefined.
struct EvalRow {
  double dice = 0, sens = 0, spec = 0;
  double msd = 0, rmsd = 0, hd = 0;
  double rec_ssim = 0, rec_psnr = 0;
  double bias_ssim = 0, bias_psnr = 0;
  double affine_err_vox = 0;
  double tv_chi = 0;
};

/// Names and accessors for every EvalRow field, in report order.
struct EvalField {
  const char* name;
  double EvalRow::*member;
};
const std::vector<EvalField>& eval_fields();

/// Scores one prediction against the sample's generation targets:
/// brain mask from the warped output vs mask_gt; reconstruction SSIM/PSNR
/// of warped vs x_gt; the recovered bias field (1/χ, or x/translated in
/// direct mode) vs bias_gt inside the brain; mean voxel displacement of
/// the predicted transform vs the generating one over brain voxels.
EvalRow evaluate_sample(const phantom::PhantomSample& s, const EvalPrediction& p);

struct Aggregate {
  double mean = 0;
  double sd = 0;
  int64_t n = 0;  // NaN entries are excluded
};
Aggregate aggregate(const std::vector<double>& values);

/// Long-format plain-text report: one `record` line per sample and metric,
/// one `aggregate` line per metric, grouped by λ.
void write_report(const std::filesystem::path& path, const std::vector<double>& lambdas,
                  const std::vector<std::vector<EvalRow>>& rows_per_lambda);

}  // namespace npp::evaluate
