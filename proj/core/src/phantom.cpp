#include "npp/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numbers>
#include <string>
#include <vector>

#include "npp/errors.hpp"
#include "npp/hash.hpp"
#include "npp/tensor.hpp"

namespace npp::phantom {

namespace {

// Independent per-stage stream so that neutralizing one stage (zero noise,
// zero bias amplitude) cannot shift the draws of another.
uint64_t sub_seed(uint64_t seed, const char* tag) {
  uint64_t h = fnv1a64(&seed, sizeof(seed));
  return fnv1a64(tag, std::strlen(tag), h);
}

// Same-size separable Gaussian blur with zero padding, double precision.
void gauss_blur_inplace(std::vector<double>& v, std::array<int64_t, 3> dims, double sigma) {
  const int64_t radius = std::max<int64_t>(1, std::llround(3.0 * sigma));
  std::vector<double> taps(static_cast<size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int64_t i = -radius; i <= radius; ++i) {
    const double w = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    taps[static_cast<size_t>(i + radius)] = w;
    sum += w;
  }
  for (double& t : taps) t /= sum;

  const auto [nx, ny, nz] = dims;
  std::vector<double> tmp(v.size());
  const int64_t stride[3] = {1, nx, nx * ny};
  const int64_t extent[3] = {nx, ny, nz};
  for (int axis = 0; axis < 3; ++axis) {
    const int64_t s = stride[axis], n = extent[axis];
    for (int64_t k = 0; k < nz; ++k)
      for (int64_t j = 0; j < ny; ++j)
        for (int64_t i = 0; i < nx; ++i) {
          const int64_t pos[3] = {i, j, k};
          const int64_t base = i + nx * (j + ny * k);
          double acc = 0.0;
          const int64_t lo = std::max<int64_t>(-radius, -pos[axis]);
          const int64_t hi = std::min<int64_t>(radius, n - 1 - pos[axis]);
          for (int64_t d = lo; d <= hi; ++d)
            acc += taps[static_cast<size_t>(d + radius)] * v[static_cast<size_t>(base + d * s)];
          tmp[static_cast<size_t>(base)] = acc;
        }
    v.swap(tmp);
  }
}

void rescale_to(std::vector<double>& v, double lo, double hi) {
  auto [mn_it, mx_it] = std::minmax_element(v.begin(), v.end());
  const double mn = *mn_it, mx = *mx_it;
  if (mx - mn < 1e-30) {
    std::fill(v.begin(), v.end(), 0.5 * (lo + hi));
    return;
  }
  const double k = (hi - lo) / (mx - mn);
  for (double& x : v) x = lo + (x - mn) * k;
}

struct Mat3 {
  double m[9];
};

Mat3 matmul3(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      r.m[i * 3 + j] =
          a.m[i * 3 + 0] * b.m[0 * 3 + j] + a.m[i * 3 + 1] * b.m[1 * 3 + j] + a.m[i * 3 + 2] * b.m[2 * 3 + j];
  return r;
}

// Rotation about normalized axis `axis` by `angle` radians.
Mat3 rot3(int axis, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  switch (axis) {
    case 0: return Mat3{{1, 0, 0, 0, c, -s, 0, s, c}};
    case 1: return Mat3{{c, 0, s, 0, 1, 0, -s, 0, c}};
    default: return Mat3{{c, -s, 0, s, c, 0, 0, 0, 1}};
  }
}

}  // namespace

void PhantomSpec::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw config_error(std::string("phantom spec: ") + what);
  };
  need(dims[0] >= 8 && dims[1] >= 8 && dims[2] >= 8, "dims must be at least 8 per axis");
  need(brain_axis_lo > 0 && brain_axis_lo <= brain_axis_hi && brain_axis_hi < 1.0,
       "brain axis range must satisfy 0 < lo <= hi < 1");
  need(texture_sigma > 0, "texture sigma must be positive");
  need(skull_thickness_lo >= 0 && skull_thickness_lo <= skull_thickness_hi,
       "skull thickness range inverted");
  need(skull_intensity_lo >= 0 && skull_intensity_lo <= skull_intensity_hi &&
           skull_intensity_hi <= 1.0,
       "skull intensity range must lie in [0,1]");
  need(bias_sigma > 0, "bias sigma must be positive");
  need(bias_amplitude >= 0 && bias_amplitude < 1, "bias amplitude must lie in [0,1)");
  need(rot_deg >= 0 && rot_deg < 90, "rotation range must lie in [0,90) degrees");
  need(scale_lo > 0 && scale_lo <= scale_hi, "scale range must satisfy 0 < lo <= hi");
  need(translate >= 0 && translate < 1, "translation range must lie in [0,1)");
  need(noise_sigma >= 0, "noise sigma must be non-negative");
}

io::Volume synth_bias_field(std::array<int64_t, 3> dims, double sigma, double amplitude,
                            uint64_t seed) {
  if (!(sigma > 0)) throw domain_error("synth_bias_field: sigma must be positive");
  if (!(amplitude >= 0 && amplitude < 1))
    throw domain_error("synth_bias_field: amplitude must lie in [0,1)");
  Rng rng(seed);
  const int64_t n = dims[0] * dims[1] * dims[2];
  std::vector<double> f(static_cast<size_t>(n));
  for (double& x : f) x = rng.normal();
  gauss_blur_inplace(f, dims, sigma);
  rescale_to(f, 1.0 - amplitude, 1.0 + amplitude);
  double mean = 0.0;
  for (double x : f) mean += x;
  mean /= static_cast<double>(n);
  io::Volume out = io::make_volume(dims);
  for (int64_t i = 0; i < n; ++i)
    out.data[static_cast<size_t>(i)] = static_cast<float>(f[static_cast<size_t>(i)] / mean);
  return out;
}

spatial::AffineTransform random_affine(const PhantomSpec& spec, uint64_t seed) {
  Rng rng(seed);
  const double rad = spec.rot_deg * std::numbers::pi / 180.0;
  double ang[3], sc[3], tr[3];
  for (double& a : ang) a = rng.uniform(-rad, rad);
  for (double& s : sc) s = rng.uniform(spec.scale_lo, spec.scale_hi);
  for (double& t : tr) t = rng.uniform(-spec.translate, spec.translate);

  Mat3 r = matmul3(matmul3(rot3(0, ang[0]), rot3(1, ang[1])), rot3(2, ang[2]));
  spatial::AffineTransform m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m.A[static_cast<size_t>(i * 3 + j)] = r.m[i * 3 + j] * sc[j];
  m.t = {tr[0], tr[1], tr[2]};
  return m;
}

PhantomSample generate_phantom(const PhantomSpec& spec, uint64_t seed) {
  spec.validate();
  const auto dims = spec.dims;
  const auto [nx, ny, nz] = dims;
  const int64_t n = nx * ny * nz;

  // Geometry draws: semi-axes (d,h,w order), then shell thickness/intensity.
  Rng geo(sub_seed(seed, "geometry"));
  double axes[3];
  for (double& a : axes) a = geo.uniform(spec.brain_axis_lo, spec.brain_axis_hi);
  const double thickness = geo.uniform(spec.skull_thickness_lo, spec.skull_thickness_hi);
  const double skull_intensity = geo.uniform(spec.skull_intensity_lo, spec.skull_intensity_hi);

  // Smooth internal texture in [0.2, 0.8].
  Rng tex_rng(sub_seed(seed, "texture"));
  std::vector<double> tex(static_cast<size_t>(n));
  for (double& x : tex) x = tex_rng.normal();
  gauss_blur_inplace(tex, dims, spec.texture_sigma);
  rescale_to(tex, 0.2, 0.8);

  // Atlas-space brain and skull. The ellipsoid coordinate r is 1 on the
  // brain surface; (r - 1) * mean-semi-axis approximates voxel distance.
  const double ax_vox[3] = {axes[0] * static_cast<double>(nz) / 2.0,
                            axes[1] * static_cast<double>(ny) / 2.0,
                            axes[2] * static_cast<double>(nx) / 2.0};
  const double mean_ax = (ax_vox[0] + ax_vox[1] + ax_vox[2]) / 3.0;

  PhantomSample s;
  s.seed = seed;
  s.x_gt = io::make_volume(dims);
  s.mask_gt.dims = dims;
  s.mask_gt.voxel_size = {1, 1, 1};
  s.mask_gt.bits.assign(static_cast<size_t>(n), 0);
  io::Volume head = io::make_volume(dims);
  for (int64_t k = 0; k < nz; ++k)
    for (int64_t j = 0; j < ny; ++j)
      for (int64_t i = 0; i < nx; ++i) {
        const double p[3] = {spatial::norm_coord(k, nz), spatial::norm_coord(j, ny),
                             spatial::norm_coord(i, nx)};
        const double r = std::sqrt(p[0] * p[0] / (axes[0] * axes[0]) +
                                   p[1] * p[1] / (axes[1] * axes[1]) +
                                   p[2] * p[2] / (axes[2] * axes[2]));
        const size_t v = static_cast<size_t>(i + nx * (j + ny * k));
        const double d_vox = (r - 1.0) * mean_ax;
        if (r < 1.0) {
          const double fade = std::min(1.0, -d_vox / 1.5);
          const float val = static_cast<float>(tex[v] * fade);
          s.x_gt.data[v] = val;
          head.data[v] = val;
          s.mask_gt.bits[v] = 1;
        } else if (d_vox >= 1.0 && d_vox <= 1.0 + thickness) {
          head.data[v] = static_cast<float>(skull_intensity);
        }
      }

  // Pose: every input voxel pulls from the atlas head through phi_gt.
  s.phi_gt = random_affine(spec, sub_seed(seed, "affine"));
  ad::Tape<double> g;
  const std::array<int64_t, 3> tdims{nz, ny, nx};
  spatial::SamplingGrid<double> grid = spatial::affine_grid<double>(s.phi_gt, tdims);
  ad::Tensor<double> posed = spatial::trilinear_sample(g, io::to_tensor<double>(head), grid);

  io::Volume mask_float = io::make_volume(dims);
  for (int64_t v = 0; v < n; ++v)
    mask_float.data[static_cast<size_t>(v)] = s.mask_gt.bits[static_cast<size_t>(v)] ? 1.0f : 0.0f;
  ad::Tensor<double> posed_mask =
      spatial::trilinear_sample(g, io::to_tensor<double>(mask_float), grid);
  s.mask_in_x.dims = dims;
  s.mask_in_x.voxel_size = {1, 1, 1};
  s.mask_in_x.bits.assign(static_cast<size_t>(n), 0);
  for (int64_t v = 0; v < n; ++v)
    s.mask_in_x.bits[static_cast<size_t>(v)] = (*posed_mask.vals)[static_cast<size_t>(v)] > 0.5;

  s.bias_gt = synth_bias_field(dims, spec.bias_sigma, spec.bias_amplitude, sub_seed(seed, "bias"));

  Rng noise(sub_seed(seed, "noise"));
  s.x = io::make_volume(dims);
  for (int64_t v = 0; v < n; ++v) {
    const double clean = (*posed.vals)[static_cast<size_t>(v)] *
                         static_cast<double>(s.bias_gt.data[static_cast<size_t>(v)]);
    const double noisy = clean + spec.noise_sigma * noise.normal();
    s.x.data[static_cast<size_t>(v)] = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
  }
  return s;
}

io::Volume gamma_apply(const io::Volume& x, double g) {
  if (!(g > 0)) throw domain_error("gamma_apply: exponent must be positive");
  io::Volume out = x;
  for (float& v : out.data) {
    if (!(v >= 0.0f && v <= 1.0f))
      throw domain_error("gamma_apply: values must lie in [0,1], got " + std::to_string(v));
    v = static_cast<float>(std::pow(static_cast<double>(v), g));
  }
  return out;
}

double sample_gamma(Rng& rng) { return std::exp(rng.uniform(-0.3, 0.3)); }

io::Volume gamma_augment(const io::Volume& x, uint64_t seed) {
  Rng rng(seed);
  return gamma_apply(x, sample_gamma(rng));
}

uint64_t spec_hash(const PhantomSpec& spec) {
  char buf[640];
  const int len = std::snprintf(
      buf, sizeof(buf),
      "dims=%lld,%lld,%lld axes=%.17g,%.17g tex=%.17g skull=%.17g,%.17g,%.17g,%.17g "
      "bias=%.17g,%.17g rot=%.17g scale=%.17g,%.17g trans=%.17g noise=%.17g",
      static_cast<long long>(spec.dims[0]), static_cast<long long>(spec.dims[1]),
      static_cast<long long>(spec.dims[2]), spec.brain_axis_lo, spec.brain_axis_hi,
      spec.texture_sigma, spec.skull_thickness_lo, spec.skull_thickness_hi,
      spec.skull_intensity_lo, spec.skull_intensity_hi, spec.bias_sigma, spec.bias_amplitude,
      spec.rot_deg, spec.scale_lo, spec.scale_hi, spec.translate, spec.noise_sigma);
  return fnv1a64(buf, static_cast<size_t>(len));
}

}  // namespace npp::phantom
