#include "npp/spatial.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "npp/tensor_ops.hpp"

namespace npp::spatial {

double det(const AffineTransform& m) {
  const auto& a = m.A;
  return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
         a[2] * (a[3] * a[7] - a[4] * a[6]);
}

AffineTransform compose(const AffineTransform& a, const AffineTransform& b) {
  AffineTransform r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += a.A[static_cast<size_t>(3 * i + k)] * b.A[static_cast<size_t>(3 * k + j)];
      r.A[static_cast<size_t>(3 * i + j)] = acc;
    }
  for (int i = 0; i < 3; ++i)
    r.t[static_cast<size_t>(i)] = a.A[static_cast<size_t>(3 * i)] * b.t[0] +
                                  a.A[static_cast<size_t>(3 * i + 1)] * b.t[1] +
                                  a.A[static_cast<size_t>(3 * i + 2)] * b.t[2] +
                                  a.t[static_cast<size_t>(i)];
  return r;
}

AffineTransform invert(const AffineTransform& m) {
  const double d = det(m);
  if (std::abs(d) <= 1e-12)
    throw invalid_affine_error("invert: determinant " + std::to_string(d) + " too close to zero");
  const auto& a = m.A;
  AffineTransform r;
  const double id = 1.0 / d;
  r.A[0] = (a[4] * a[8] - a[5] * a[7]) * id;
  r.A[1] = (a[2] * a[7] - a[1] * a[8]) * id;
  r.A[2] = (a[1] * a[5] - a[2] * a[4]) * id;
  r.A[3] = (a[5] * a[6] - a[3] * a[8]) * id;
  r.A[4] = (a[0] * a[8] - a[2] * a[6]) * id;
  r.A[5] = (a[2] * a[3] - a[0] * a[5]) * id;
  r.A[6] = (a[3] * a[7] - a[4] * a[6]) * id;
  r.A[7] = (a[1] * a[6] - a[0] * a[7]) * id;
  r.A[8] = (a[0] * a[4] - a[1] * a[3]) * id;
  for (int i = 0; i < 3; ++i) {
    r.t[static_cast<size_t>(i)] = -(r.A[static_cast<size_t>(3 * i)] * m.t[0] +
                                    r.A[static_cast<size_t>(3 * i + 1)] * m.t[1] +
                                    r.A[static_cast<size_t>(3 * i + 2)] * m.t[2]);
  }
  return r;
}

namespace {

void check_dims(const std::array<int64_t, 3>& dims, const char* who) {
  for (int64_t d : dims)
    if (d < 1) throw shape_error(std::string(who) + ": output extents must be positive");
}

// Constant [V,3] matrix of output voxel-center coordinates in (d,h,w) order.
template <class T>
ad::Tensor<T> coord_matrix(std::array<int64_t, 3> dims) {
  const int64_t V = dims[0] * dims[1] * dims[2];
  std::vector<T> c(static_cast<size_t>(V * 3));
  int64_t i = 0;
  for (int64_t d = 0; d < dims[0]; ++d) {
    const T pd = static_cast<T>(norm_coord(d, dims[0]));
    for (int64_t h = 0; h < dims[1]; ++h) {
      const T ph = static_cast<T>(norm_coord(h, dims[1]));
      for (int64_t w = 0; w < dims[2]; ++w) {
        c[static_cast<size_t>(i)] = pd;
        c[static_cast<size_t>(i + 1)] = ph;
        c[static_cast<size_t>(i + 2)] = static_cast<T>(norm_coord(w, dims[2]));
        i += 3;
      }
    }
  }
  return ad::Tensor<T>(ad::Shape{V, 3}, std::move(c));
}

}  // namespace

template <class T>
SamplingGrid<T> affine_grid(const AffineTransform& m, std::array<int64_t, 3> dims) {
  check_dims(dims, "affine_grid");
  SamplingGrid<T> grid;
  grid.dims = dims;
  grid.coords = coord_matrix<T>(dims);
  T* pc = grid.coords.data();
  const int64_t V = grid.coords.dim(0);
  for (int64_t v = 0; v < V; ++v) {
    T* row = pc + v * 3;
    const std::array<double, 3> q = m.apply({static_cast<double>(row[0]),
                                             static_cast<double>(row[1]),
                                             static_cast<double>(row[2])});
    row[0] = static_cast<T>(q[0]);
    row[1] = static_cast<T>(q[1]);
    row[2] = static_cast<T>(q[2]);
  }
  return grid;
}

template <class T>
SamplingGrid<T> affine_grid(ad::Tape<T>& g, const ad::Tensor<T>& A, const ad::Tensor<T>& t,
                            std::array<int64_t, 3> dims) {
  check_dims(dims, "affine_grid");
  ad::require(A.ndim() == 2 && A.dim(0) == 3 && A.dim(1) == 3,
              "affine_grid: A must be [3,3], got " + ad::shape_str(A.shape));
  ad::require(t.ndim() == 1 && t.dim(0) == 3, "affine_grid: t must be [3]");
  SamplingGrid<T> grid;
  grid.dims = dims;
  ad::Tensor<T> P = coord_matrix<T>(dims);  // constant
  // row v of P * A^T is A p_v; adding t broadcast finishes the map.
  grid.coords = ad::add_rowvec(g, ad::matmul(g, P, ad::transpose2d(g, A)), t);
  return grid;
}

template <class T>
ad::Tensor<T> trilinear_sample(ad::Tape<T>& g, const ad::Tensor<T>& x, const SamplingGrid<T>& grid) {
  ad::require(x.ndim() == 5, "trilinear_sample: input must be [N,C,D,H,W]");
  const ad::Tensor<T>& coords = grid.coords;
  ad::require(coords.defined() && coords.ndim() == 2 && coords.dim(1) == 3,
              "trilinear_sample: grid coords must be [V,3]");
  const int64_t V = coords.dim(0);
  ad::require(V == grid.dims[0] * grid.dims[1] * grid.dims[2],
              "trilinear_sample: grid dims do not match coordinate count");
  const int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);

  ad::Tensor<T> out = ad::Tensor<T>::zeros(ad::Shape{N, C, grid.dims[0], grid.dims[1], grid.dims[2]});
  const T* px = x.data();
  const T* pc = coords.data();
  T* po = out.data();

  const double sd = static_cast<double>(D), sh = static_cast<double>(H), sw = static_cast<double>(W);

#pragma omp parallel for schedule(static)
  for (int64_t v = 0; v < V; ++v) {
    const double qd = static_cast<double>(pc[v * 3]);
    const double qh = static_cast<double>(pc[v * 3 + 1]);
    const double qw = static_cast<double>(pc[v * 3 + 2]);
    // normalized -> continuous voxel index
    const double fd = (qd + 1.0) * sd * 0.5 - 0.5;
    const double fh = (qh + 1.0) * sh * 0.5 - 0.5;
    const double fw = (qw + 1.0) * sw * 0.5 - 0.5;
    const int64_t d0 = static_cast<int64_t>(std::floor(fd));
    const int64_t h0 = static_cast<int64_t>(std::floor(fh));
    const int64_t w0 = static_cast<int64_t>(std::floor(fw));
    const T wd = static_cast<T>(fd - std::floor(fd));
    const T wh = static_cast<T>(fh - std::floor(fh));
    const T ww = static_cast<T>(fw - std::floor(fw));
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const T* xb = px + (n * C + c) * D * H * W;
        T acc = T(0);
        for (int k = 0; k < 8; ++k) {
          const int64_t dd = d0 + (k >> 2 & 1);
          const int64_t hh = h0 + (k >> 1 & 1);
          const int64_t wv = w0 + (k & 1);
          if (dd < 0 || dd >= D || hh < 0 || hh >= H || wv < 0 || wv >= W) continue;
          const T wgt = ((k & 4) ? wd : T(1) - wd) * ((k & 2) ? wh : T(1) - wh) *
                        ((k & 1) ? ww : T(1) - ww);
          acc += wgt * xb[(dd * H + hh) * W + wv];
        }
        po[(n * C + c) * V + v] = acc;
      }
  }

  if (x.tracked() || coords.tracked()) {
    const int64_t nx = x.node, ng = coords.node;
    auto vx = x.vals;
    auto vc = coords.vals;
    out.node = g.push(out.size(), [=](ad::Tape<T>& t, const std::vector<T>& gy) {
      const T* px2 = vx->data();
      const T* pc2 = vc->data();
      T* gx = nx >= 0 ? t.grad_buffer(nx).data() : nullptr;
      T* gc = ng >= 0 ? t.grad_buffer(ng).data() : nullptr;
      // Scatter into x and per-voxel coordinate gradients; single sweep,
      // sequential so accumulation order is fixed.
      for (int64_t v = 0; v < V; ++v) {
        const double qd = static_cast<double>(pc2[v * 3]);
        const double qh = static_cast<double>(pc2[v * 3 + 1]);
        const double qw = static_cast<double>(pc2[v * 3 + 2]);
        const double fd = (qd + 1.0) * sd * 0.5 - 0.5;
        const double fh = (qh + 1.0) * sh * 0.5 - 0.5;
        const double fw = (qw + 1.0) * sw * 0.5 - 0.5;
        const int64_t d0 = static_cast<int64_t>(std::floor(fd));
        const int64_t h0 = static_cast<int64_t>(std::floor(fh));
        const int64_t w0 = static_cast<int64_t>(std::floor(fw));
        const T wd = static_cast<T>(fd - std::floor(fd));
        const T wh = static_cast<T>(fh - std::floor(fh));
        const T ww = static_cast<T>(fw - std::floor(fw));
        T gd = T(0), gh = T(0), gw = T(0);
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c) {
            const T gv = gy[static_cast<size_t>((n * C + c) * V + v)];
            if (gv == T(0)) continue;
            const T* xb = px2 + (n * C + c) * D * H * W;
            T* gxb = gx ? gx + (n * C + c) * D * H * W : nullptr;
            for (int k = 0; k < 8; ++k) {
              const int64_t dd = d0 + (k >> 2 & 1);
              const int64_t hh = h0 + (k >> 1 & 1);
              const int64_t wv = w0 + (k & 1);
              if (dd < 0 || dd >= D || hh < 0 || hh >= H || wv < 0 || wv >= W) continue;
              const T cd = (k & 4) ? wd : T(1) - wd;
              const T ch = (k & 2) ? wh : T(1) - wh;
              const T cw = (k & 1) ? ww : T(1) - ww;
              if (gxb) gxb[(dd * H + hh) * W + wv] += cd * ch * cw * gv;
              if (gc) {
                const T xv = xb[(dd * H + hh) * W + wv];
                const T sd_ = (k & 4) ? T(1) : T(-1);
                const T sh_ = (k & 2) ? T(1) : T(-1);
                const T sw_ = (k & 1) ? T(1) : T(-1);
                gd += sd_ * ch * cw * xv * gv;
                gh += cd * sh_ * cw * xv * gv;
                gw += cd * ch * sw_ * xv * gv;
              }
            }
          }
        if (gc) {
          // chain through voxel-index mapping: d(f)/d(q) = S/2
          gc[v * 3] += gd * static_cast<T>(sd * 0.5);
          gc[v * 3 + 1] += gh * static_cast<T>(sh * 0.5);
          gc[v * 3 + 2] += gw * static_cast<T>(sw * 0.5);
        }
      }
    });
  }
  return out;
}

// ---- sidecar ----------------------------------------------------------------

namespace {

std::array<double, 16> mat4_mul(const std::array<double, 16>& a, const std::array<double, 16>& b) {
  std::array<double, 16> r{};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 4; ++k)
        acc += a[static_cast<size_t>(4 * i + k)] * b[static_cast<size_t>(4 * k + j)];
      r[static_cast<size_t>(4 * i + j)] = acc;
    }
  return r;
}

}  // namespace

std::array<double, 16> voxel_matrix(const AffineTransform& m, std::array<int64_t, 3> in_dims,
                                    std::array<int64_t, 3> out_dims) {
  // Volume axis order is (x,y,z) with x fastest; the tensor (d,h,w) axes map
  // to (z,y,x). out voxel -> out normalized (d,h,w):
  const double nxo = static_cast<double>(out_dims[0]), nyo = static_cast<double>(out_dims[1]),
               nzo = static_cast<double>(out_dims[2]);
  const std::array<double, 16> to_norm{0, 0, 2.0 / nzo, 1.0 / nzo - 1.0,
                                       0, 2.0 / nyo, 0, 1.0 / nyo - 1.0,
                                       2.0 / nxo, 0, 0, 1.0 / nxo - 1.0,
                                       0, 0, 0, 1};
  const std::array<double, 16> aff{m.A[0], m.A[1], m.A[2], m.t[0],
                                   m.A[3], m.A[4], m.A[5], m.t[1],
                                   m.A[6], m.A[7], m.A[8], m.t[2],
                                   0, 0, 0, 1};
  const double nxi = static_cast<double>(in_dims[0]), nyi = static_cast<double>(in_dims[1]),
               nzi = static_cast<double>(in_dims[2]);
  // in normalized (d,h,w) -> in voxel (x,y,z)
  const std::array<double, 16> to_voxel{0, 0, nxi / 2.0, nxi / 2.0 - 0.5,
                                        0, nyi / 2.0, 0, nyi / 2.0 - 0.5,
                                        nzi / 2.0, 0, 0, nzi / 2.0 - 0.5,
                                        0, 0, 0, 1};
  return mat4_mul(to_voxel, mat4_mul(aff, to_norm));
}

void write_affine_sidecar(const std::filesystem::path& path, const AffineTransform& m,
                          std::array<int64_t, 3> in_dims, std::array<int64_t, 3> out_dims) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot open for writing: " + path.string());
  auto put = [&out](const double* v, size_t n) {
    char buf[32];
    for (size_t i = 0; i < n; ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", v[i]);
      out << ' ' << buf;
    }
    out << '\n';
  };
  out << "# affine transform, normalized [-1,1] coordinates, points ordered (d,h,w)\n";
  out << "# q = A p + t maps output grid points to source locations\n";
  out << "A";
  put(m.A.data(), 9);
  out << "t";
  put(m.t.data(), 3);
  const std::array<double, 16> vm = voxel_matrix(m, in_dims, out_dims);
  out << "# output voxel [x y z 1] -> input voxel [x y z], row-major\n";
  out << "M";
  put(vm.data(), 16);
  out << "in_dims " << in_dims[0] << ' ' << in_dims[1] << ' ' << in_dims[2] << '\n';
  out << "out_dims " << out_dims[0] << ' ' << out_dims[1] << ' ' << out_dims[2] << '\n';
  if (!out) throw io_error("write failed: " + path.string());
}

AffineTransform read_affine_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open: " + path.string());
  AffineTransform m;
  bool got_a = false, got_t = false;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    std::string tag;
    is >> tag;
    if (tag == "A") {
      for (auto& v : m.A) is >> v;
      got_a = !is.fail();
    } else if (tag == "t") {
      for (auto& v : m.t) is >> v;
      got_t = !is.fail();
    }
  }
  if (!got_a || !got_t) throw format_error("sidecar missing A or t line: " + path.string());
  return m;
}

#define NPP_INSTANTIATE_SPATIAL(T)                                                        \
  template SamplingGrid<T> affine_grid<T>(const AffineTransform&, std::array<int64_t, 3>); \
  template SamplingGrid<T> affine_grid<T>(ad::Tape<T>&, const ad::Tensor<T>&,             \
                                          const ad::Tensor<T>&, std::array<int64_t, 3>);  \
  template ad::Tensor<T> trilinear_sample<T>(ad::Tape<T>&, const ad::Tensor<T>&,          \
                                             const SamplingGrid<T>&);

NPP_INSTANTIATE_SPATIAL(float)
NPP_INSTANTIATE_SPATIAL(double)
#undef NPP_INSTANTIATE_SPATIAL

}  // namespace npp::spatial
