#include "npp/evaluate.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "npp/errors.hpp"
#include "npp/metrics.hpp"
#include "npp/nn_ops.hpp"

namespace npp::evaluate {

namespace {

double masked_psnr(const io::Volume& a, const io::Volume& b, const metrics::BinaryMask& region,
                   double peak) {
  double mse = 0.0;
  int64_t n = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    if (!region.bits[i]) continue;
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    mse += d * d;
    ++n;
  }
  if (n == 0) throw undefined_metric_error("masked psnr: empty region");
  mse /= static_cast<double>(n);
  if (mse < 1e-12) return 99.0;
  return 10.0 * std::log10(peak * peak / mse);
}

// Reciprocal with the denominator clamped away from zero; outside the brain
// the multiplier heads to zero and the quotient is meaningless anyway.
io::Volume safe_reciprocal(const io::Volume& v) {
  io::Volume out = v;
  for (float& x : out.data) x = 1.0f / std::max(x, 1e-3f);
  return out;
}

io::Volume safe_ratio(const io::Volume& num, const io::Volume& den) {
  io::Volume out = num;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] /= std::max(den.data[i], 1e-3f);
  return out;
}

}  // namespace

EvalPrediction run_model(const model::NppModel<float>& m, const io::Volume& x, double lambda) {
  ad::Tape<float> g;
  model::NppOutput<float> out =
      model::forward(g, m.config, m.params, io::to_tensor<float>(x), lambda, true);
  EvalPrediction p;
  p.translated = io::from_tensor(out.translated, x);
  p.warped = io::from_tensor(out.warped, x);
  p.phi = out.phi;
  if (out.chi.defined()) {
    p.has_chi = true;
    p.chi_full = io::from_tensor(out.chi_full, x);
    ad::Tape<float> g2;
    p.tv_chi = static_cast<double>(ad::tv3d(g2, out.chi.detached()).scalar());
  }
  return p;
}

const std::vector<EvalField>& eval_fields() {
  static const std::vector<EvalField> fields = {
      {"dice", &EvalRow::dice},           {"sens", &EvalRow::sens},
      {"spec", &EvalRow::spec},           {"msd", &EvalRow::msd},
      {"rmsd", &EvalRow::rmsd},           {"hd", &EvalRow::hd},
      {"rec_ssim", &EvalRow::rec_ssim},   {"rec_psnr", &EvalRow::rec_psnr},
      {"bias_ssim", &EvalRow::bias_ssim}, {"bias_psnr", &EvalRow::bias_psnr},
      {"affine_vox", &EvalRow::affine_err_vox}, {"tv_chi", &EvalRow::tv_chi}};
  return fields;
}

EvalRow evaluate_sample(const phantom::PhantomSample& s, const EvalPrediction& p) {
  EvalRow r;

  const metrics::BinaryMask pred_mask = metrics::brain_mask_from_output(p.warped);
  r.dice = metrics::dice(pred_mask, s.mask_gt);
  const metrics::SensSpec ss = metrics::sens_spec(pred_mask, s.mask_gt);
  r.sens = ss.sens;
  r.spec = ss.spec;
  if (pred_mask.count() > 0) {
    const metrics::SurfaceStats sd = metrics::surface_distances(pred_mask, s.mask_gt);
    r.msd = sd.msd;
    r.rmsd = sd.rmsd;
    r.hd = sd.hd;
  } else {
    r.msd = r.rmsd = r.hd = std::numeric_limits<double>::quiet_NaN();
  }

  r.rec_ssim = metrics::ssim_metric(p.warped, s.x_gt);
  r.rec_psnr = metrics::psnr(p.warped, s.x_gt, 1.0);

  // The multiplier equals the reciprocal bias inside the brain, so compare
  // its reciprocal to the generating field there and nowhere else.
  const io::Volume bias_est =
      p.has_chi ? safe_reciprocal(p.chi_full) : safe_ratio(s.x, p.translated);
  r.bias_ssim = metrics::masked_ssim(bias_est, s.bias_gt, s.mask_in_x);
  r.bias_psnr = masked_psnr(bias_est, s.bias_gt, s.mask_in_x, 1.0);

  // Mean displacement between the predicted and generating sampling maps
  // over brain voxels, reported in input-grid voxels.
  const spatial::AffineTransform gt_map = spatial::invert(s.phi_gt);
  const auto [nx, ny, nz] = s.mask_gt.dims;
  double sum = 0.0;
  int64_t cnt = 0;
  for (int64_t k = 0; k < nz; ++k)
    for (int64_t j = 0; j < ny; ++j)
      for (int64_t i = 0; i < nx; ++i) {
        if (!s.mask_gt.at(i, j, k)) continue;
        const std::array<double, 3> q{spatial::norm_coord(k, nz), spatial::norm_coord(j, ny),
                                      spatial::norm_coord(i, nx)};
        const std::array<double, 3> a = p.phi.apply(q);
        const std::array<double, 3> b = gt_map.apply(q);
        const double dd = (a[0] - b[0]) * static_cast<double>(nz) / 2.0;
        const double dh = (a[1] - b[1]) * static_cast<double>(ny) / 2.0;
        const double dw = (a[2] - b[2]) * static_cast<double>(nx) / 2.0;
        sum += std::sqrt(dd * dd + dh * dh + dw * dw);
        ++cnt;
      }
  r.affine_err_vox = cnt > 0 ? sum / static_cast<double>(cnt)
                             : std::numeric_limits<double>::quiet_NaN();
  r.tv_chi = p.tv_chi;
  return r;
}

Aggregate aggregate(const std::vector<double>& values) {
  Aggregate a;
  double sum = 0.0;
  for (double v : values) {
    if (std::isnan(v)) continue;
    sum += v;
    ++a.n;
  }
  if (a.n == 0) return a;
  a.mean = sum / static_cast<double>(a.n);
  double dev = 0.0;
  for (double v : values) {
    if (std::isnan(v)) continue;
    dev += (v - a.mean) * (v - a.mean);
  }
  a.sd = std::sqrt(dev / static_cast<double>(a.n));
  return a;
}

void write_report(const std::filesystem::path& path, const std::vector<double>& lambdas,
                  const std::vector<std::vector<EvalRow>>& rows_per_lambda) {
  if (lambdas.size() != rows_per_lambda.size())
    throw domain_error("write_report: one row set per lambda required");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot write report: " + path.string());
  f << "npp-eval 1\n";
  char buf[160];
  for (size_t li = 0; li < lambdas.size(); ++li) {
    const std::vector<EvalRow>& rows = rows_per_lambda[li];
    for (size_t si = 0; si < rows.size(); ++si)
      for (const EvalField& fld : eval_fields()) {
        std::snprintf(buf, sizeof(buf), "record %.9g %zu %s %.9g\n", lambdas[li], si, fld.name,
                      rows[si].*(fld.member));
        f << buf;
      }
    for (const EvalField& fld : eval_fields()) {
      std::vector<double> vals;
      vals.reserve(rows.size());
      for (const EvalRow& r : rows) vals.push_back(r.*(fld.member));
      const Aggregate a = aggregate(vals);
      std::snprintf(buf, sizeof(buf), "aggregate %.9g %s %.9g %.9g %lld\n", lambdas[li], fld.name,
                    a.mean, a.sd, static_cast<long long>(a.n));
      f << buf;
    }
  }
  if (!f) throw io_error("failed writing report: " + path.string());
}

}  // namespace npp::evaluate
