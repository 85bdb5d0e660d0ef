#include "npp/metrics.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "npp/errors.hpp"
#include "npp/losses.hpp"
#include "npp/nn_ops.hpp"
#include "npp/tensor_ops.hpp"

namespace npp::metrics {

namespace {

void require_same_dims(const std::array<int64_t, 3>& a, const std::array<int64_t, 3>& b,
                       const char* who) {
  if (a != b)
    throw shape_error(std::string(who) + ": extent mismatch " + std::to_string(a[0]) + "x" +
                      std::to_string(a[1]) + "x" + std::to_string(a[2]) + " vs " +
                      std::to_string(b[0]) + "x" + std::to_string(b[1]) + "x" +
                      std::to_string(b[2]));
}

struct Ivec {
  int64_t i, j, k;
};

// Mask voxels with at least one of the 6 face neighbors outside the mask;
// the volume border counts as outside.
std::vector<Ivec> surface_voxels(const BinaryMask& m) {
  std::vector<Ivec> out;
  const auto [nx, ny, nz] = m.dims;
  for (int64_t k = 0; k < nz; ++k)
    for (int64_t j = 0; j < ny; ++j)
      for (int64_t i = 0; i < nx; ++i) {
        if (!m.at(i, j, k)) continue;
        const bool exposed = i == 0 || !m.at(i - 1, j, k) || i == nx - 1 || !m.at(i + 1, j, k) ||
                             j == 0 || !m.at(i, j - 1, k) || j == ny - 1 || !m.at(i, j + 1, k) ||
                             k == 0 || !m.at(i, j, k - 1) || k == nz - 1 || !m.at(i, j, k + 1);
        if (exposed) out.push_back({i, j, k});
      }
  return out;
}

// Nearest-surface distance in mm for every voxel of `from` against `to`.
void directed_distances(const std::vector<Ivec>& from, const std::vector<Ivec>& to,
                        const std::array<double, 3>& voxel, std::vector<double>& out) {
  for (const Ivec& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const Ivec& q : to) {
      const double dx = static_cast<double>(p.i - q.i) * voxel[0];
      const double dy = static_cast<double>(p.j - q.j) * voxel[1];
      const double dz = static_cast<double>(p.k - q.k) * voxel[2];
      const double d2 = dx * dx + dy * dy + dz * dz;
      if (d2 < best) best = d2;
    }
    out.push_back(std::sqrt(best));
  }
}

// Per-window mean SSIM map in double (valid windows only), plus the window
// radius so callers can map window centers back to voxel coordinates.
ad::Tensor<double> ssim_map(const io::Volume& a, const io::Volume& b, int window, double sigma) {
  require_same_dims(a.dims, b.dims, "ssim");
  ad::Tape<double> g;
  ad::Tensor<double> ta = io::to_tensor<double>(a);
  ad::Tensor<double> tb = io::to_tensor<double>(b);

  std::vector<double> taps(static_cast<size_t>(window));
  const double c = (window - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < window; ++i) {
    taps[static_cast<size_t>(i)] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
    sum += taps[static_cast<size_t>(i)];
  }
  for (double& t : taps) t /= sum;

  const ad::Tensor<double> zero_bias(ad::Shape{1}, std::vector<double>{0.0});
  auto blur = [&](const ad::Tensor<double>& x) {
    auto kern = [&](int64_t kd, int64_t kh, int64_t kw) {
      std::vector<double> v = taps;
      return ad::Tensor<double>(ad::Shape{1, 1, kd, kh, kw}, std::move(v));
    };
    ad::Tensor<double> h = ad::conv3d(g, x, kern(window, 1, 1), zero_bias, 1, 0);
    h = ad::conv3d(g, h, kern(1, window, 1), zero_bias, 1, 0);
    return ad::conv3d(g, h, kern(1, 1, window), zero_bias, 1, 0);
  };

  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;
  ad::Tensor<double> mu_a = blur(ta);
  ad::Tensor<double> mu_b = blur(tb);
  ad::Tensor<double> m_aa = blur(ad::mul(g, ta, ta));
  ad::Tensor<double> m_bb = blur(ad::mul(g, tb, tb));
  ad::Tensor<double> m_ab = blur(ad::mul(g, ta, tb));

  ad::Tensor<double> mu_ab = ad::mul(g, mu_a, mu_b);
  ad::Tensor<double> var_a = ad::sub(g, m_aa, ad::mul(g, mu_a, mu_a));
  ad::Tensor<double> var_b = ad::sub(g, m_bb, ad::mul(g, mu_b, mu_b));
  ad::Tensor<double> cov = ad::sub(g, m_ab, mu_ab);
  ad::Tensor<double> num = ad::mul(g, ad::add_scalar(g, ad::mul_scalar(g, mu_ab, 2.0), kC1),
                                   ad::add_scalar(g, ad::mul_scalar(g, cov, 2.0), kC2));
  ad::Tensor<double> den = ad::mul(
      g, ad::add_scalar(g, ad::add(g, ad::mul(g, mu_a, mu_a), ad::mul(g, mu_b, mu_b)), kC1),
      ad::add_scalar(g, ad::add(g, var_a, var_b), kC2));
  return ad::div(g, num, den);
}

}  // namespace

int64_t BinaryMask::count() const {
  int64_t n = 0;
  for (uint8_t b : bits) n += (b != 0);
  return n;
}

double dice(const BinaryMask& a, const BinaryMask& b) {
  require_same_dims(a.dims, b.dims, "dice");
  int64_t na = 0, nb = 0, ni = 0;
  const size_t n = a.bits.size();
  for (size_t v = 0; v < n; ++v) {
    const bool pa = a.bits[v] != 0, pb = b.bits[v] != 0;
    na += pa;
    nb += pb;
    ni += (pa && pb);
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(na + nb);
}

SensSpec sens_spec(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_dims(pred.dims, gt.dims, "sens_spec");
  int64_t tp = 0, fn = 0, tn = 0, fp = 0;
  const size_t n = pred.bits.size();
  for (size_t v = 0; v < n; ++v) {
    const bool p = pred.bits[v] != 0, t = gt.bits[v] != 0;
    tp += (p && t);
    fn += (!p && t);
    tn += (!p && !t);
    fp += (p && !t);
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  SensSpec r;
  r.sens = (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : nan;
  r.spec = (tn + fp) > 0 ? static_cast<double>(tn) / static_cast<double>(tn + fp) : nan;
  return r;
}

SurfaceStats surface_distances(const BinaryMask& a, const BinaryMask& b) {
  require_same_dims(a.dims, b.dims, "surface_distances");
  const std::vector<Ivec> sa = surface_voxels(a);
  const std::vector<Ivec> sb = surface_voxels(b);
  if (sa.empty() || sb.empty())
    throw undefined_metric_error("surface_distances: empty mask has no surface");

  std::vector<double> pooled;
  pooled.reserve(sa.size() + sb.size());
  directed_distances(sa, sb, a.voxel_size, pooled);
  directed_distances(sb, sa, a.voxel_size, pooled);

  double sum = 0.0, sum2 = 0.0, mx = 0.0;
  for (double d : pooled) {
    sum += d;
    sum2 += d * d;
    if (d > mx) mx = d;
  }
  const double n = static_cast<double>(pooled.size());
  SurfaceStats s;
  s.msd = sum / n;
  s.rmsd = std::sqrt(sum2 / n);
  s.hd = mx;
  return s;
}

double psnr(const io::Volume& a, const io::Volume& b, double peak) {
  require_same_dims(a.dims, b.dims, "psnr");
  if (!(peak > 0.0)) throw domain_error("psnr: peak must be positive");
  double mse = 0.0;
  const size_t n = a.data.size();
  for (size_t v = 0; v < n; ++v) {
    const double d = static_cast<double>(a.data[v]) - static_cast<double>(b.data[v]);
    mse += d * d;
  }
  mse /= static_cast<double>(n);
  if (mse < 1e-12) return 99.0;
  return 10.0 * std::log10(peak * peak / mse);
}

double ssim_metric(const io::Volume& a, const io::Volume& b) {
  require_same_dims(a.dims, b.dims, "ssim_metric");
  ad::Tape<double> g;
  ad::Tensor<double> loss =
      losses::ssim_loss(g, io::to_tensor<double>(a), io::to_tensor<double>(b));
  return 1.0 - loss.scalar();
}

double masked_ssim(const io::Volume& a, const io::Volume& b, const BinaryMask& region) {
  require_same_dims(a.dims, region.dims, "masked_ssim");
  constexpr int kWindow = 7;
  const int64_t r = kWindow / 2;
  ad::Tensor<double> map = ssim_map(a, b, kWindow, 1.5);
  // map axes are [1,1,D',H',W'] with D'=nz-2r etc; window center of map cell
  // (d,h,w) is volume voxel (i=w+r, j=h+r, k=d+r).
  const int64_t md = map.dim(2), mh = map.dim(3), mw = map.dim(4);
  double sum = 0.0;
  int64_t cnt = 0;
  const double* mv = map.vals->data();
  for (int64_t d = 0; d < md; ++d)
    for (int64_t h = 0; h < mh; ++h)
      for (int64_t w = 0; w < mw; ++w) {
        if (!region.at(w + r, h + r, d + r)) continue;
        sum += mv[(d * mh + h) * mw + w];
        ++cnt;
      }
  if (cnt == 0)
    throw undefined_metric_error("masked_ssim: no window center inside the region");
  return sum / static_cast<double>(cnt);
}

BinaryMask largest_component(const BinaryMask& m) {
  BinaryMask out;
  out.dims = m.dims;
  out.voxel_size = m.voxel_size;
  out.bits.assign(m.bits.size(), 0);
  const auto [nx, ny, nz] = m.dims;
  std::vector<int32_t> label(m.bits.size(), 0);
  int32_t next = 0;
  int32_t best_label = 0;
  int64_t best_size = 0;
  std::vector<int64_t> stack;
  auto idx = [&](int64_t i, int64_t j, int64_t k) { return i + nx * (j + ny * k); };
  for (int64_t k = 0; k < nz; ++k)
    for (int64_t j = 0; j < ny; ++j)
      for (int64_t i = 0; i < nx; ++i) {
        const int64_t v0 = idx(i, j, k);
        if (m.bits[static_cast<size_t>(v0)] == 0 || label[static_cast<size_t>(v0)] != 0) continue;
        const int32_t id = ++next;
        int64_t size = 0;
        stack.assign(1, v0);
        label[static_cast<size_t>(v0)] = id;
        while (!stack.empty()) {
          const int64_t v = stack.back();
          stack.pop_back();
          ++size;
          const int64_t ci = v % nx, cj = (v / nx) % ny, ck = v / (nx * ny);
          const int64_t nb[6][3] = {{ci - 1, cj, ck}, {ci + 1, cj, ck}, {ci, cj - 1, ck},
                                    {ci, cj + 1, ck}, {ci, cj, ck - 1}, {ci, cj, ck + 1}};
          for (const auto& q : nb) {
            if (q[0] < 0 || q[0] >= nx || q[1] < 0 || q[1] >= ny || q[2] < 0 || q[2] >= nz)
              continue;
            const int64_t w = idx(q[0], q[1], q[2]);
            if (m.bits[static_cast<size_t>(w)] != 0 && label[static_cast<size_t>(w)] == 0) {
              label[static_cast<size_t>(w)] = id;
              stack.push_back(w);
            }
          }
        }
        if (size > best_size) {
          best_size = size;
          best_label = id;
        }
      }
  if (best_label == 0) return out;
  for (size_t v = 0; v < label.size(); ++v)
    if (label[v] == best_label) out.bits[v] = 1;
  return out;
}

BinaryMask brain_mask_from_output(const io::Volume& v) {
  BinaryMask m;
  m.dims = v.dims;
  m.voxel_size = v.voxel_size;
  m.bits.assign(v.data.size(), 0);
  float lo = v.data.empty() ? 0.0f : v.data[0];
  float hi = lo;
  for (float x : v.data) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  const float range = hi - lo;
  if (!(range > 0.0f)) return m;
  const float thr = lo + 0.01f * range;
  for (size_t i = 0; i < v.data.size(); ++i) m.bits[i] = v.data[i] > thr ? 1 : 0;
  return largest_component(m);
}

}  // namespace npp::metrics
