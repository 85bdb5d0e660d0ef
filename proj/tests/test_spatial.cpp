#include <array>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "npp/errors.hpp"
#include "npp/rng.hpp"
#include "npp/spatial.hpp"
#include "npp/tensor.hpp"
#include "npp/tensor_ops.hpp"
#include "test_util.hpp"

using namespace npp;
using ad::Tape;
using ad::Tensor;
using spatial::AffineTransform;
using test::ScratchDir;

namespace {

AffineTransform random_transform(uint64_t seed) {
  Rng rng(seed);
  AffineTransform m;
  for (double& a : m.A) a += rng.uniform(-0.2, 0.2);
  for (double& t : m.t) t = rng.uniform(-0.3, 0.3);
  return m;
}

Tensor<float> random_field(uint64_t seed, std::array<int64_t, 3> dhw) {
  Rng rng(seed);
  Tensor<float> x = Tensor<float>::zeros({1, 1, dhw[0], dhw[1], dhw[2]});
  for (int64_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  return x;
}

}  // namespace

TEST_SUITE("spatial") {

TEST_CASE("determinant and composition") {
  AffineTransform s;
  s.A = {2, 0, 0, 0, 3, 0, 0, 0, 4};
  CHECK(spatial::det(s) == doctest::Approx(24.0));

  AffineTransform shift;
  shift.t = {1, 2, 3};
  // compose(a, b) applies b first: scale then shift vs shift then scale.
  const std::array<double, 3> p{1, 1, 1};
  const std::array<double, 3> q1 = spatial::compose(shift, s).apply(p);
  CHECK(q1[0] == doctest::Approx(3.0));
  CHECK(q1[1] == doctest::Approx(5.0));
  CHECK(q1[2] == doctest::Approx(7.0));
  const std::array<double, 3> q2 = spatial::compose(s, shift).apply(p);
  CHECK(q2[0] == doctest::Approx(4.0));
  CHECK(q2[1] == doctest::Approx(9.0));
  CHECK(q2[2] == doctest::Approx(16.0));
}

TEST_CASE("inverse composes to the identity") {
  const AffineTransform m = random_transform(11);
  const AffineTransform mi = spatial::invert(m);
  const AffineTransform id = spatial::compose(m, mi);
  for (int i = 0; i < 9; ++i)
    CHECK(id.A[static_cast<size_t>(i)] ==
          doctest::Approx(i % 4 == 0 ? 1.0 : 0.0).epsilon(1e-12).scale(1.0));
  for (double t : id.t) CHECK(t == doctest::Approx(0.0).epsilon(1e-12).scale(1.0));

  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const std::array<double, 3> p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const std::array<double, 3> back = mi.apply(m.apply(p));
    for (int a = 0; a < 3; ++a)
      CHECK(back[static_cast<size_t>(a)] ==
            doctest::Approx(p[static_cast<size_t>(a)]).epsilon(1e-12));
  }
}

TEST_CASE("singular transform cannot be inverted") {
  AffineTransform m;
  m.A = {1, 0, 0, 2, 0, 0, 0, 0, 1};  // rank 2
  CHECK_THROWS_AS(spatial::invert(m), invalid_affine_error);
  CHECK(spatial::det(m) == doctest::Approx(0.0));
}

TEST_CASE("normalized voxel center coordinates") {
  CHECK(spatial::norm_coord(0, 4) == doctest::Approx(-0.75));
  CHECK(spatial::norm_coord(3, 4) == doctest::Approx(0.75));
  // Centers are symmetric about 0 and never touch the domain edges.
  for (int64_t s : {2, 5, 16})
    CHECK(spatial::norm_coord(0, s) == doctest::Approx(-spatial::norm_coord(s - 1, s)));
}

TEST_CASE("identity grid lists voxel centers in raster order") {
  const std::array<int64_t, 3> dims{2, 3, 4};
  const spatial::SamplingGrid<float> grid =
      spatial::affine_grid<float>(AffineTransform::identity(), dims);
  CHECK(grid.dims == dims);
  CHECK(grid.coords.dim(0) == 2 * 3 * 4);
  CHECK(grid.coords.dim(1) == 3);
  int64_t row = 0;
  for (int64_t d = 0; d < dims[0]; ++d)
    for (int64_t h = 0; h < dims[1]; ++h)
      for (int64_t w = 0; w < dims[2]; ++w, ++row) {
        CHECK(grid.coords[3 * row + 0] == doctest::Approx(spatial::norm_coord(d, dims[0])));
        CHECK(grid.coords[3 * row + 1] == doctest::Approx(spatial::norm_coord(h, dims[1])));
        CHECK(grid.coords[3 * row + 2] == doctest::Approx(spatial::norm_coord(w, dims[2])));
      }
}

TEST_CASE("identity resampling returns the input bitwise on power-of-two extents") {
  // (2i+1)/n is exact in binary floating point when n is a power of two,
  // so the identity grid lands on voxel centers with zero rounding error.
  Tape<float> g;
  const std::array<int64_t, 3> dims{4, 4, 8};
  const Tensor<float> x = random_field(21, dims);
  const spatial::SamplingGrid<float> grid =
      spatial::affine_grid<float>(AffineTransform::identity(), dims);
  const Tensor<float> y = spatial::trilinear_sample(g, x, grid);
  REQUIRE(y.size() == x.size());
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("identity resampling is accurate on arbitrary extents") {
  // For general n the normalized center coordinate rounds, so the sample
  // can blend a neighbor with weight on the order of the coordinate ULP.
  Tape<float> g;
  const std::array<int64_t, 3> dims{3, 4, 5};
  const Tensor<float> x = random_field(21, dims);
  const spatial::SamplingGrid<float> grid =
      spatial::affine_grid<float>(AffineTransform::identity(), dims);
  const Tensor<float> y = spatial::trilinear_sample(g, x, grid);
  REQUIRE(y.size() == x.size());
  for (int64_t i = 0; i < x.size(); ++i)
    CHECK(std::abs(y[i] - x[i]) <= 1e-6f);
}

TEST_CASE("unit translation shifts by one voxel and zero-fills the edge") {
  // t_w = 2/W moves every sample to the next voxel center along w.
  Tape<float> g;
  const std::array<int64_t, 3> dims{2, 2, 4};
  const Tensor<float> x = random_field(22, dims);
  AffineTransform m;
  m.t = {0, 0, 2.0 / static_cast<double>(dims[2])};
  const Tensor<float> y = spatial::trilinear_sample(g, x, spatial::affine_grid<float>(m, dims));
  for (int64_t d = 0; d < dims[0]; ++d)
    for (int64_t h = 0; h < dims[1]; ++h)
      for (int64_t w = 0; w < dims[2]; ++w) {
        const int64_t o = (d * dims[1] + h) * dims[2] + w;
        if (w + 1 < dims[2]) {
          const int64_t i = (d * dims[1] + h) * dims[2] + w + 1;
          CHECK(y[o] == doctest::Approx(x[i]));
        } else {
          CHECK(y[o] == 0.0f);
        }
      }
}

TEST_CASE("samples outside the input domain are zero") {
  Tape<float> g;
  const std::array<int64_t, 3> dims{3, 3, 3};
  const Tensor<float> x = random_field(23, dims);
  AffineTransform m;
  m.t = {5.0, 5.0, 5.0};
  const Tensor<float> y = spatial::trilinear_sample(g, x, spatial::affine_grid<float>(m, dims));
  for (int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0f);
}

TEST_CASE("tracked grid matches the fixed grid and carries gradients") {
  const AffineTransform m = random_transform(31);
  const std::array<int64_t, 3> dims{4, 4, 4};
  const spatial::SamplingGrid<double> fixed = spatial::affine_grid<double>(m, dims);

  Tape<double> g;
  std::vector<double> av(m.A.begin(), m.A.end());
  std::vector<double> tv(m.t.begin(), m.t.end());
  Tensor<double> A = g.leaf({3, 3}, av);
  Tensor<double> t = g.leaf({3}, tv);
  const spatial::SamplingGrid<double> tracked = spatial::affine_grid(g, A, t, dims);
  REQUIRE(tracked.coords.size() == fixed.coords.size());
  for (int64_t i = 0; i < fixed.coords.size(); ++i)
    CHECK(tracked.coords[i] == doctest::Approx(fixed.coords[i]).epsilon(1e-14));

  Tensor<double> x = Tensor<double>::zeros({1, 1, 4, 4, 4});
  Rng rng(32);
  for (int64_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(0.0, 1.0);
  Tensor<double> y = ad::sum_all(g, spatial::trilinear_sample(g, x, tracked));
  g.backward(y);
  const std::vector<double>& ga = g.grad(A);
  const std::vector<double>& gt = g.grad(t);
  REQUIRE(ga.size() == 9);
  REQUIRE(gt.size() == 3);
  bool any = false;
  for (double v : ga) {
    CHECK(std::isfinite(v));
    any = any || v != 0.0;
  }
  for (double v : gt) CHECK(std::isfinite(v));
  CHECK(any);
}

TEST_CASE("sidecar file round-trips the transform exactly") {
  ScratchDir dir("sidecar");
  const AffineTransform m = random_transform(41);
  const std::filesystem::path p = dir / "affine.txt";
  spatial::write_affine_sidecar(p, m, {5, 6, 7}, {4, 3, 8});
  const AffineTransform r = spatial::read_affine_sidecar(p);
  // %.17g output reproduces IEEE doubles bit for bit.
  for (int i = 0; i < 9; ++i) CHECK(r.A[static_cast<size_t>(i)] == m.A[static_cast<size_t>(i)]);
  for (int i = 0; i < 3; ++i) CHECK(r.t[static_cast<size_t>(i)] == m.t[static_cast<size_t>(i)]);
}

TEST_CASE("sidecar voxel matrix agrees with the normalized transform") {
  const AffineTransform m = random_transform(42);
  const std::array<int64_t, 3> in_dims{5, 6, 7};    // (nx, ny, nz)
  const std::array<int64_t, 3> out_dims{4, 3, 8};
  const std::array<double, 16> vm = spatial::voxel_matrix(m, in_dims, out_dims);
  Rng rng(43);
  for (int trial = 0; trial < 20; ++trial) {
    const double x = static_cast<double>(rng.uniform_int(out_dims[0]));
    const double y = static_cast<double>(rng.uniform_int(out_dims[1]));
    const double z = static_cast<double>(rng.uniform_int(out_dims[2]));
    // Normalized point ordered (d,h,w) = (z,y,x) axes.
    const std::array<double, 3> p{
        spatial::norm_coord(static_cast<int64_t>(z), out_dims[2]),
        spatial::norm_coord(static_cast<int64_t>(y), out_dims[1]),
        spatial::norm_coord(static_cast<int64_t>(x), out_dims[0])};
    const std::array<double, 3> q = m.apply(p);
    const double ex = (q[2] + 1.0) * static_cast<double>(in_dims[0]) / 2.0 - 0.5;
    const double ey = (q[1] + 1.0) * static_cast<double>(in_dims[1]) / 2.0 - 0.5;
    const double ez = (q[0] + 1.0) * static_cast<double>(in_dims[2]) / 2.0 - 0.5;
    const double mx = vm[0] * x + vm[1] * y + vm[2] * z + vm[3];
    const double my = vm[4] * x + vm[5] * y + vm[6] * z + vm[7];
    const double mz = vm[8] * x + vm[9] * y + vm[10] * z + vm[11];
    CHECK(mx == doctest::Approx(ex).epsilon(1e-12));
    CHECK(my == doctest::Approx(ey).epsilon(1e-12));
    CHECK(mz == doctest::Approx(ez).epsilon(1e-12));
  }
}

TEST_CASE("malformed sidecars are rejected") {
  ScratchDir dir("sidecar_bad");
  CHECK_THROWS_AS(spatial::read_affine_sidecar(dir / "missing.txt"), io_error);

  const std::filesystem::path no_t = dir / "no_t.txt";
  test::write_bytes(no_t, std::vector<unsigned char>{'A', ' ', '1', '\n'});
  CHECK_THROWS_AS(spatial::read_affine_sidecar(no_t), format_error);

  const std::filesystem::path short_a = dir / "short_a.txt";
  {
    std::string text = "A 1 0 0 0 1 0\nt 0 0 0\n";
    test::write_bytes(short_a, std::vector<unsigned char>(text.begin(), text.end()));
  }
  CHECK_THROWS_AS(spatial::read_affine_sidecar(short_a), format_error);
}

}  // TEST_SUITE
