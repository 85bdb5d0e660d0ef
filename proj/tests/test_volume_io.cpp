#include <cstring>
#include <vector>

#include "doctest.h"
#include "npp/errors.hpp"
#include "npp/rng.hpp"
#include "npp/volume.hpp"
#include "test_util.hpp"

using namespace npp;
using test::ScratchDir;

namespace {

io::Volume random_volume(uint64_t seed, std::array<int64_t, 3> dims = {5, 4, 3}) {
  Rng rng(seed);
  io::Volume v = io::make_volume(dims, 0.0f, {1.0, 1.25, 2.0});
  for (float& x : v.data) x = static_cast<float>(rng.uniform(-10.0, 10.0));
  return v;
}

// Standard NIfTI-1 header field offsets.
constexpr size_t kOffSizeofHdr = 0;
constexpr size_t kOffDim = 40;
constexpr size_t kOffDatatype = 70;
constexpr size_t kOffBitpix = 72;
constexpr size_t kOffSclSlope = 112;
constexpr size_t kOffSclInter = 116;
constexpr size_t kOffSformCode = 254;
constexpr size_t kOffMagic = 344;
constexpr size_t kVoxOffset = 352;

template <class T>
void poke(std::vector<unsigned char>& bytes, size_t off, T value) {
  std::memcpy(bytes.data() + off, &value, sizeof value);
}

}  // namespace

TEST_SUITE("volume-io") {

TEST_CASE("write read write is byte-identical") {
  ScratchDir dir("vio_roundtrip");
  const io::Volume v = random_volume(1);
  io::write_nifti(v, dir / "a.nii");
  const io::Volume r = io::read_nifti(dir / "a.nii");
  CHECK(r.dims == v.dims);
  CHECK(r.voxel_size[1] == doctest::Approx(1.25));
  CHECK(r.data == v.data);
  io::write_nifti(r, dir / "b.nii");
  CHECK(test::files_equal(dir / "a.nii", dir / "b.nii"));
}

TEST_CASE("world affine survives the round trip") {
  ScratchDir dir("vio_affine");
  io::Volume v = random_volume(2);
  v.world_affine = {0, -1, 0, 10, 1, 0, 0, -20, 0, 0, 2, 5, 0, 0, 0, 1};
  io::write_nifti(v, dir / "a.nii");
  const io::Volume r = io::read_nifti(dir / "a.nii");
  for (int i = 0; i < 16; ++i) CHECK(r.world_affine[i] == doctest::Approx(v.world_affine[i]));
}

TEST_CASE("reader rejects malformed files") {
  ScratchDir dir("vio_reject");
  io::write_nifti(random_volume(3), dir / "good.nii");
  const std::vector<unsigned char> good = test::read_bytes(dir / "good.nii");

  SUBCASE("missing file") { CHECK_THROWS_AS(io::read_nifti(dir / "absent.nii"), io_error); }
  SUBCASE("truncated header") {
    test::write_bytes(dir / "t.nii", {good.begin(), good.begin() + 100});
    CHECK_THROWS_AS(io::read_nifti(dir / "t.nii"), format_error);
  }
  SUBCASE("truncated voxel data") {
    test::write_bytes(dir / "t.nii", {good.begin(), good.end() - 8});
    CHECK_THROWS_AS(io::read_nifti(dir / "t.nii"), format_error);
  }
  SUBCASE("wrong sizeof_hdr") {
    auto bad = good;
    poke<int32_t>(bad, kOffSizeofHdr, 347);
    test::write_bytes(dir / "t.nii", bad);
    CHECK_THROWS_AS(io::read_nifti(dir / "t.nii"), format_error);
  }
  SUBCASE("byte-swapped header") {
    auto bad = good;
    poke<int32_t>(bad, kOffSizeofHdr, 0x5C010000);
    test::write_bytes(dir / "t.nii", bad);
    CHECK_THROWS_AS(io::read_nifti(dir / "t.nii"), format_error);
  }
  SUBCASE("two-file magic") {
    auto bad = good;
    std::memcpy(bad.data() + kOffMagic, "ni1", 4);
    test::write_bytes(dir / "t.nii", bad);
    CHECK_THROWS_AS(io::read_nifti(dir / "t.nii"), format_error);
  }
  SUBCASE("unsupported datatype") {
    auto bad = good;
    poke<int16_t>(bad, kOffDatatype, 8);  // int32
    poke<int16_t>(bad, kOffBitpix, 32);
    test::write_bytes(dir / "t.nii", bad);
    CHECK_THROWS_AS(io::read_nifti(dir / "t.nii"), unsupported_dtype_error);
  }
  SUBCASE("bitpix contradicting datatype") {
    auto bad = good;
    poke<int16_t>(bad, kOffBitpix, 8);
    test::write_bytes(dir / "t.nii", bad);
    CHECK_THROWS_AS(io::read_nifti(dir / "t.nii"), format_error);
  }
  SUBCASE("4-d image") {
    auto bad = good;
    poke<int16_t>(bad, kOffDim, 4);
    poke<int16_t>(bad, kOffDim + 8, 2);  // dim[4]
    test::write_bytes(dir / "t.nii", bad);
    CHECK_THROWS_AS(io::read_nifti(dir / "t.nii"), unsupported_dtype_error);
  }
}

TEST_CASE("integer samples map through slope and intercept") {
  ScratchDir dir("vio_scaled");
  io::Volume v = io::make_volume({2, 2, 2});
  io::write_nifti(v, dir / "base.nii");
  auto bytes = test::read_bytes(dir / "base.nii");
  bytes.resize(kVoxOffset);

  SUBCASE("uint8") {
    poke<int16_t>(bytes, kOffDatatype, 2);
    poke<int16_t>(bytes, kOffBitpix, 8);
    poke<float>(bytes, kOffSclSlope, 0.5f);
    poke<float>(bytes, kOffSclInter, -1.0f);
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<unsigned char>(10 + i));
    test::write_bytes(dir / "u8.nii", bytes);
    const io::Volume r = io::read_nifti(dir / "u8.nii");
    CHECK(r.data[0] == doctest::Approx(4.0));   // 10*0.5 - 1
    CHECK(r.data[7] == doctest::Approx(7.5));   // 17*0.5 - 1
  }
  SUBCASE("int16 with zero slope treated as unscaled") {
    poke<int16_t>(bytes, kOffDatatype, 4);
    poke<int16_t>(bytes, kOffBitpix, 16);
    poke<float>(bytes, kOffSclSlope, 0.0f);
    poke<float>(bytes, kOffSclInter, 99.0f);  // must be ignored
    for (int i = 0; i < 8; ++i) {
      const int16_t s = static_cast<int16_t>(-3 + i);
      bytes.push_back(static_cast<unsigned char>(s & 0xff));
      bytes.push_back(static_cast<unsigned char>((s >> 8) & 0xff));
    }
    test::write_bytes(dir / "s16.nii", bytes);
    const io::Volume r = io::read_nifti(dir / "s16.nii");
    CHECK(r.data[0] == doctest::Approx(-3.0));
    CHECK(r.data[7] == doctest::Approx(4.0));
  }
}

TEST_CASE("pixdim fallback when both transform codes are zero") {
  ScratchDir dir("vio_pixdim");
  io::Volume v = io::make_volume({2, 2, 2}, 0.0f, {2.0, 3.0, 4.0});
  io::write_nifti(v, dir / "a.nii");
  auto bytes = test::read_bytes(dir / "a.nii");
  poke<int16_t>(bytes, kOffSformCode, 0);
  test::write_bytes(dir / "b.nii", bytes);
  const io::Volume r = io::read_nifti(dir / "b.nii");
  CHECK(r.world_affine[0] == doctest::Approx(2.0));
  CHECK(r.world_affine[5] == doctest::Approx(3.0));
  CHECK(r.world_affine[10] == doctest::Approx(4.0));
  CHECK(r.world_affine[15] == doctest::Approx(1.0));
}

TEST_CASE("validate rejects inconsistent volumes") {
  io::Volume v = io::make_volume({2, 2, 2});
  v.data.pop_back();
  CHECK_THROWS_AS(v.validate(), shape_error);
  io::Volume z;
  CHECK_THROWS_AS(z.validate(), shape_error);
  io::Volume neg = io::make_volume({2, 2, 2});
  neg.voxel_size[1] = 0.0;
  CHECK_THROWS_AS(neg.validate(), shape_error);
}

TEST_CASE("conform windows intensities to the 99.9th percentile") {
  // 1000 ascending values: the nearest-rank 99.9th percentile is the 999th
  // smallest, so exactly the top value saturates to 1.
  io::Volume v = io::make_volume({10, 10, 10});
  for (int i = 0; i < 1000; ++i) v.data[static_cast<size_t>(i)] = static_cast<float>(i);
  const io::Volume c = io::conform(v, {10, 10, 10}, {1, 1, 1});
  float lo = 1e9f, hi = -1e9f;
  for (float x : c.data) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  CHECK(lo == doctest::Approx(0.0));
  CHECK(hi == doctest::Approx(1.0));
  int saturated = 0;
  for (float x : c.data)
    if (x >= 1.0f) ++saturated;
  CHECK(saturated == 2);  // values 998 and 999 clamp to the window top
}

TEST_CASE("conform of a constant volume is all zeros") {
  io::Volume v = io::make_volume({8, 8, 8}, 3.5f);
  const io::Volume c = io::conform(v, {8, 8, 8}, {1, 1, 1});
  for (float x : c.data) CHECK(x == 0.0f);
}

TEST_CASE("conform at the output's own grid is a bit-exact identity") {
  // An exact-grid pass leaves n - rank voxels saturated at 1.0, so the
  // second window is [0, 1] and every voxel passes through unchanged.
  io::Volume v = io::make_volume({16, 16, 16});
  Rng rng(7);
  for (float& x : v.data) x = static_cast<float>(rng.uniform(-10.0, 10.0));
  const io::Volume once = io::conform(v, {16, 16, 16}, {1, 1, 1});
  const io::Volume twice = io::conform(once, {16, 16, 16}, {1, 1, 1});
  CHECK(once.dims == twice.dims);
  CHECK(once.world_affine == twice.world_affine);
  CHECK(once.data == twice.data);
}

TEST_CASE("conform centers the target grid on the input's world center") {
  io::Volume v = random_volume(7, {12, 10, 8});
  const io::Volume c = io::conform(v, {16, 16, 16}, {1, 1, 1});
  CHECK(c.dims == std::array<int64_t, 3>{16, 16, 16});
  auto center = [](const io::Volume& u) {
    std::array<double, 3> w{};
    for (int r = 0; r < 3; ++r) {
      const auto& a = u.world_affine;
      w[static_cast<size_t>(r)] =
          a[static_cast<size_t>(4 * r)] * (static_cast<double>(u.dims[0] - 1) / 2) +
          a[static_cast<size_t>(4 * r + 1)] * (static_cast<double>(u.dims[1] - 1) / 2) +
          a[static_cast<size_t>(4 * r + 2)] * (static_cast<double>(u.dims[2] - 1) / 2) +
          a[static_cast<size_t>(4 * r + 3)];
    }
    return w;
  };
  const std::array<double, 3> cin = center(v);
  const std::array<double, 3> cout = center(c);
  for (int r = 0; r < 3; ++r)
    CHECK(cout[static_cast<size_t>(r)] == doctest::Approx(cin[static_cast<size_t>(r)]).epsilon(1e-12));
  // Output intensities stay inside the [0, 1] window (zero fill outside).
  for (float x : c.data) {
    CHECK(x >= 0.0f);
    CHECK(x <= 1.0f);
  }
}

TEST_CASE("tensor conversion keeps the flat layout") {
  io::Volume v = random_volume(9, {4, 3, 2});
  const ad::Tensor<float> t = io::to_tensor<float>(v);
  CHECK(t.ndim() == 5);
  CHECK(t.dim(2) == 2);  // D = nz
  CHECK(t.dim(4) == 4);  // W = nx
  CHECK(t[5] == v.data[5]);
  const io::Volume back = io::from_tensor(t, v);
  CHECK(back.dims == v.dims);
  CHECK(back.data == v.data);
}

}  // TEST_SUITE
