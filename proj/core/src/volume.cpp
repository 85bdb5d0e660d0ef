#include "npp/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace npp::io {

namespace {

// NIfTI-1 header, 348 bytes, naturally packed on every platform this
// project targets. Field offsets follow the published layout.
struct NiftiHeader {
  int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  int32_t extents;
  int16_t session_error;
  char regular;
  char dim_info;
  int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  int16_t intent_code;
  int16_t datatype;
  int16_t bitpix;
  int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  int16_t qform_code;
  int16_t sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
static_assert(sizeof(NiftiHeader) == 348, "NiftiHeader must pack to 348 bytes");

constexpr int16_t kDtUint8 = 2;
constexpr int16_t kDtInt16 = 4;
constexpr int16_t kDtFloat32 = 16;

std::array<double, 16> affine_from_header(const NiftiHeader& h) {
  std::array<double, 16> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
  if (h.sform_code > 0) {
    for (int j = 0; j < 4; ++j) {
      m[static_cast<size_t>(j)] = h.srow_x[j];
      m[static_cast<size_t>(4 + j)] = h.srow_y[j];
      m[static_cast<size_t>(8 + j)] = h.srow_z[j];
    }
    return m;
  }
  if (h.qform_code > 0) {
    const double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
    const double aa = 1.0 - (b * b + c * c + d * d);
    const double a = aa > 0.0 ? std::sqrt(aa) : 0.0;
    const double qfac = h.pixdim[0] < 0.0f ? -1.0 : 1.0;
    const double px = h.pixdim[1], py = h.pixdim[2], pz = h.pixdim[3];
    m[0] = (a * a + b * b - c * c - d * d) * px;
    m[1] = (2 * b * c - 2 * a * d) * py;
    m[2] = (2 * b * d + 2 * a * c) * pz * qfac;
    m[3] = h.qoffset_x;
    m[4] = (2 * b * c + 2 * a * d) * px;
    m[5] = (a * a + c * c - b * b - d * d) * py;
    m[6] = (2 * c * d - 2 * a * b) * pz * qfac;
    m[7] = h.qoffset_y;
    m[8] = (2 * b * d - 2 * a * c) * px;
    m[9] = (2 * c * d + 2 * a * b) * py;
    m[10] = (a * a + d * d - c * c - b * b) * pz * qfac;
    m[11] = h.qoffset_z;
    return m;
  }
  m[0] = h.pixdim[1];
  m[5] = h.pixdim[2];
  m[10] = h.pixdim[3];
  return m;
}

// 4x4 inverse via Gauss-Jordan; the matrices here are affine so the last
// row stays (0,0,0,1), but a full solve keeps the code obvious.
std::array<double, 16> invert4(const std::array<double, 16>& m) {
  double a[4][8];
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      a[i][j] = m[static_cast<size_t>(4 * i + j)];
      a[i][j + 4] = i == j ? 1.0 : 0.0;
    }
  }
  for (int col = 0; col < 4; ++col) {
    int piv = col;
    for (int r = col + 1; r < 4; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    if (std::abs(a[piv][col]) <= 1e-12)
      throw invalid_affine_error("volume world affine is singular");
    if (piv != col)
      for (int j = 0; j < 8; ++j) std::swap(a[piv][j], a[col][j]);
    const double inv = 1.0 / a[col][col];
    for (int j = 0; j < 8; ++j) a[col][j] *= inv;
    for (int r = 0; r < 4; ++r) {
      if (r == col) continue;
      const double f = a[r][col];
      if (f == 0.0) continue;
      for (int j = 0; j < 8; ++j) a[r][j] -= f * a[col][j];
    }
  }
  std::array<double, 16> out;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) out[static_cast<size_t>(4 * i + j)] = a[i][j + 4];
  return out;
}

}  // namespace

void Volume::validate() const {
  for (int64_t d : dims)
    if (d < 1) throw shape_error("volume extents must be positive");
  for (double v : voxel_size)
    if (!(v > 0.0)) throw shape_error("voxel size must be positive");
  if (static_cast<int64_t>(data.size()) != voxels())
    throw shape_error("volume data holds " + std::to_string(data.size()) + " values, expected " +
                      std::to_string(voxels()));
}

Volume make_volume(std::array<int64_t, 3> dims, float fill, std::array<double, 3> voxel) {
  Volume v;
  v.dims = dims;
  v.voxel_size = voxel;
  v.world_affine = {voxel[0], 0, 0, 0, 0, voxel[1], 0, 0, 0, 0, voxel[2], 0, 0, 0, 0, 1};
  v.data.assign(static_cast<size_t>(dims[0] * dims[1] * dims[2]), fill);
  v.validate();
  return v;
}

Volume read_nifti(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open: " + path.string());

  NiftiHeader h;
  in.read(reinterpret_cast<char*>(&h), sizeof h);
  if (in.gcount() != sizeof h) throw format_error("truncated header: " + path.string());

  if (h.sizeof_hdr != 348) {
    if (h.sizeof_hdr == 0x5C010000)  // 348 byte-swapped
      throw format_error("byte-swapped NIfTI files are not supported: " + path.string());
    throw format_error("not a NIfTI-1 file (sizeof_hdr = " + std::to_string(h.sizeof_hdr) + ")");
  }
  if (std::memcmp(h.magic, "n+1", 4) != 0) {
    if (std::memcmp(h.magic, "ni1", 4) == 0)
      throw format_error("two-file NIfTI pairs are not supported: " + path.string());
    throw format_error("bad NIfTI magic: " + path.string());
  }
  const int nd = h.dim[0];
  if (nd < 1 || nd > 7) throw format_error("invalid dim[0] = " + std::to_string(nd));
  for (int i = 4; i <= nd; ++i)
    if (h.dim[i] > 1)
      throw unsupported_dtype_error("only 3-d volumes are supported (dim[" + std::to_string(i) +
                                    "] = " + std::to_string(h.dim[i]) + ")");
  Volume v;
  v.dims = {nd >= 1 ? h.dim[1] : 1, nd >= 2 ? h.dim[2] : 1, nd >= 3 ? h.dim[3] : 1};
  for (int64_t d : v.dims)
    if (d < 1) throw format_error("non-positive extent in header");
  for (int i = 0; i < 3; ++i) {
    const double p = std::abs(static_cast<double>(h.pixdim[i + 1]));
    v.voxel_size[static_cast<size_t>(i)] = p > 0.0 ? p : 1.0;
  }
  v.world_affine = affine_from_header(h);

  const int64_t n = v.voxels();
  int bpp = 0;
  switch (h.datatype) {
    case kDtUint8: bpp = 1; break;
    case kDtInt16: bpp = 2; break;
    case kDtFloat32: bpp = 4; break;
    default:
      throw unsupported_dtype_error("unsupported datatype code " + std::to_string(h.datatype));
  }
  if (h.bitpix != 8 * bpp)
    throw format_error("bitpix " + std::to_string(h.bitpix) + " inconsistent with datatype");

  const int64_t off = static_cast<int64_t>(h.vox_offset);
  if (off < 348) throw format_error("vox_offset " + std::to_string(off) + " overlaps header");
  in.seekg(off, std::ios::beg);
  if (!in) throw io_error("cannot seek to voxel data: " + path.string());

  std::vector<char> raw(static_cast<size_t>(n * bpp));
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw format_error("truncated voxel data: " + path.string());

  const double slope = h.scl_slope == 0.0f ? 1.0 : static_cast<double>(h.scl_slope);
  const double inter = h.scl_slope == 0.0f ? 0.0 : static_cast<double>(h.scl_inter);
  v.data.resize(static_cast<size_t>(n));
  switch (h.datatype) {
    case kDtUint8: {
      const auto* p = reinterpret_cast<const uint8_t*>(raw.data());
      for (int64_t i = 0; i < n; ++i)
        v.data[static_cast<size_t>(i)] = static_cast<float>(p[i] * slope + inter);
      break;
    }
    case kDtInt16: {
      int16_t s;
      for (int64_t i = 0; i < n; ++i) {
        std::memcpy(&s, raw.data() + i * 2, 2);
        v.data[static_cast<size_t>(i)] = static_cast<float>(s * slope + inter);
      }
      break;
    }
    case kDtFloat32: {
      float f;
      for (int64_t i = 0; i < n; ++i) {
        std::memcpy(&f, raw.data() + i * 4, 4);
        v.data[static_cast<size_t>(i)] = static_cast<float>(f * slope + inter);
      }
      break;
    }
  }
  v.validate();
  return v;
}

void write_nifti(const Volume& v, const std::filesystem::path& path) {
  v.validate();
  NiftiHeader h;
  std::memset(&h, 0, sizeof h);
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  for (int i = 0; i < 3; ++i) h.dim[i + 1] = static_cast<int16_t>(v.dims[static_cast<size_t>(i)]);
  for (int i = 4; i < 8; ++i) h.dim[i] = 1;
  for (int64_t d : v.dims)
    if (d > 32767) throw shape_error("extent too large for NIfTI-1 dim field");
  h.datatype = kDtFloat32;
  h.bitpix = 32;
  h.pixdim[0] = 1.0f;
  for (int i = 0; i < 3; ++i)
    h.pixdim[i + 1] = static_cast<float>(v.voxel_size[static_cast<size_t>(i)]);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  h.xyzt_units = 2;  // millimeters
  h.qform_code = 0;
  h.sform_code = 1;
  for (int j = 0; j < 4; ++j) {
    h.srow_x[j] = static_cast<float>(v.world_affine[static_cast<size_t>(j)]);
    h.srow_y[j] = static_cast<float>(v.world_affine[static_cast<size_t>(4 + j)]);
    h.srow_z[j] = static_cast<float>(v.world_affine[static_cast<size_t>(8 + j)]);
  }
  std::memcpy(h.magic, "n+1", 4);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(&h), sizeof h);
  const char pad[4] = {0, 0, 0, 0};  // no header extensions
  out.write(pad, 4);
  out.write(reinterpret_cast<const char*>(v.data.data()),
            static_cast<std::streamsize>(v.data.size() * 4));
  if (!out) throw io_error("write failed: " + path.string());
}

Volume conform(const Volume& v, std::array<int64_t, 3> target_dims,
               std::array<double, 3> target_voxel) {
  v.validate();
  for (int64_t d : target_dims)
    if (d < 1) throw shape_error("conform: target extents must be positive");
  for (double s : target_voxel)
    if (!(s > 0.0)) throw shape_error("conform: target voxel size must be positive");

  int64_t bad = 0;
  for (float f : v.data)
    if (!std::isfinite(f)) ++bad;
  if (bad > 0)
    throw numeric_error("conform: input holds " + std::to_string(bad) + " non-finite voxels");

  // Robust window: [min, 99.9th percentile] by nearest rank. After the
  // rescale exactly n - rank values sit at 1.0, so a later same-grid pass
  // recomputes the window as [0, 1] and is an exact identity.
  const int64_t n = v.voxels();
  std::vector<float> sorted(v.data);
  std::sort(sorted.begin(), sorted.end());
  const double lo = sorted.front();
  const auto rank = static_cast<size_t>(std::llround(0.999 * static_cast<double>(n - 1)));
  const double hi = sorted[rank];

  std::vector<float> scaled(static_cast<size_t>(n));
  if (hi > lo) {
    const double inv = 1.0 / (hi - lo);
    for (int64_t i = 0; i < n; ++i) {
      double x = (static_cast<double>(v.data[static_cast<size_t>(i)]) - lo) * inv;
      scaled[static_cast<size_t>(i)] = static_cast<float>(std::clamp(x, 0.0, 1.0));
    }
  }
  // hi == lo leaves `scaled` all zero: a constant volume has no usable window.

  // Output grid: axis-aligned, sharing the input's world center.
  const std::array<double, 16>& win = v.world_affine;
  auto world_of = [&win](double i, double j, double k, int row) {
    return win[static_cast<size_t>(4 * row)] * i + win[static_cast<size_t>(4 * row + 1)] * j +
           win[static_cast<size_t>(4 * row + 2)] * k + win[static_cast<size_t>(4 * row + 3)];
  };
  const double ci = static_cast<double>(v.dims[0] - 1) / 2.0;
  const double cj = static_cast<double>(v.dims[1] - 1) / 2.0;
  const double ck = static_cast<double>(v.dims[2] - 1) / 2.0;
  const std::array<double, 3> center{world_of(ci, cj, ck, 0), world_of(ci, cj, ck, 1),
                                     world_of(ci, cj, ck, 2)};

  Volume out;
  out.dims = target_dims;
  out.voxel_size = target_voxel;
  out.world_affine = {target_voxel[0], 0, 0, 0, 0, target_voxel[1], 0, 0,
                      0, 0, target_voxel[2], 0, 0, 0, 0, 1};
  for (int r = 0; r < 3; ++r) {
    const double c = static_cast<double>(target_dims[static_cast<size_t>(r)] - 1) / 2.0;
    out.world_affine[static_cast<size_t>(4 * r + 3)] =
        center[static_cast<size_t>(r)] - target_voxel[static_cast<size_t>(r)] * c;
  }
  out.data.assign(static_cast<size_t>(out.voxels()), 0.0f);

  // voxel_out -> world -> voxel_in, folded into one matrix.
  const std::array<double, 16> inv_in = invert4(v.world_affine);
  std::array<double, 16> comp{};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 4; ++k)
        acc += inv_in[static_cast<size_t>(4 * i + k)] * out.world_affine[static_cast<size_t>(4 * k + j)];
      comp[static_cast<size_t>(4 * i + j)] = acc;
    }

  const int64_t nx = v.dims[0], ny = v.dims[1], nz = v.dims[2];
  int64_t idx = 0;
  for (int64_t k = 0; k < target_dims[2]; ++k)
    for (int64_t j = 0; j < target_dims[1]; ++j)
      for (int64_t i = 0; i < target_dims[0]; ++i, ++idx) {
        const double di = static_cast<double>(i), dj = static_cast<double>(j),
                     dk = static_cast<double>(k);
        const double si = comp[0] * di + comp[1] * dj + comp[2] * dk + comp[3];
        const double sj = comp[4] * di + comp[5] * dj + comp[6] * dk + comp[7];
        const double sk = comp[8] * di + comp[9] * dj + comp[10] * dk + comp[11];
        const int64_t i0 = static_cast<int64_t>(std::floor(si));
        const int64_t j0 = static_cast<int64_t>(std::floor(sj));
        const int64_t k0 = static_cast<int64_t>(std::floor(sk));
        const double wi = si - std::floor(si);
        const double wj = sj - std::floor(sj);
        const double wk = sk - std::floor(sk);
        double acc = 0.0;
        for (int c = 0; c < 8; ++c) {
          const int64_t ii = i0 + (c & 1);
          const int64_t jj = j0 + (c >> 1 & 1);
          const int64_t kk = k0 + (c >> 2 & 1);
          if (ii < 0 || ii >= nx || jj < 0 || jj >= ny || kk < 0 || kk >= nz) continue;
          const double w = ((c & 1) ? wi : 1.0 - wi) * ((c & 2) ? wj : 1.0 - wj) *
                           ((c & 4) ? wk : 1.0 - wk);
          acc += w * scaled[static_cast<size_t>(ii + nx * (jj + ny * kk))];
        }
        out.data[static_cast<size_t>(idx)] = static_cast<float>(acc);
      }
  return out;
}

template <class T>
ad::Tensor<T> to_tensor(const Volume& v) {
  v.validate();
  std::vector<T> buf(v.data.begin(), v.data.end());
  return ad::Tensor<T>(ad::Shape{1, 1, v.dims[2], v.dims[1], v.dims[0]}, std::move(buf));
}

template <class T>
Volume from_tensor(const ad::Tensor<T>& t, const Volume& like) {
  ad::require(t.ndim() == 5 && t.dim(0) == 1 && t.dim(1) == 1,
              "from_tensor: expected [1,1,D,H,W], got " + ad::shape_str(t.shape));
  Volume v;
  v.dims = {t.dim(4), t.dim(3), t.dim(2)};
  v.voxel_size = like.voxel_size;
  v.world_affine = like.world_affine;
  v.data.assign(t.vals->begin(), t.vals->end());
  v.validate();
  return v;
}

template ad::Tensor<float> to_tensor<float>(const Volume&);
template ad::Tensor<double> to_tensor<double>(const Volume&);
template Volume from_tensor<float>(const ad::Tensor<float>&, const Volume&);
template Volume from_tensor<double>(const ad::Tensor<double>&, const Volume&);

}  // namespace npp::io
