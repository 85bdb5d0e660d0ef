#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "npp/tensor.hpp"

namespace npp::io {

/// A 3-d scalar image. `data` is ordered x-fastest (index = i + nx*(j + ny*k))
/// to match the on-disk layout. `world_affine` is a row-major 4x4 matrix
/// sending homogeneous voxel indices (i,j,k,1) to world millimeters.
struct Volume {
  std::array<int64_t, 3> dims{0, 0, 0};        // (nx, ny, nz)
  std::array<double, 3> voxel_size{1, 1, 1};   // mm, positive
  std::array<double, 16> world_affine{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
  std::vector<float> data;

  int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
  float& at(int64_t i, int64_t j, int64_t k) {
    return data[static_cast<size_t>(i + dims[0] * (j + dims[1] * k))];
  }
  float at(int64_t i, int64_t j, int64_t k) const {
    return data[static_cast<size_t>(i + dims[0] * (j + dims[1] * k))];
  }
  /// Throws shape_error unless extents are positive and data matches.
  void validate() const;
};

/// Uniform volume helper.
Volume make_volume(std::array<int64_t, 3> dims, float fill = 0.0f,
                   std::array<double, 3> voxel = {1, 1, 1});

/// Reads a single-file NIfTI-1 image (magic "n+1"). Supported sample types
/// are uint8, int16 and float32; values are mapped through scl_slope/inter.
/// The world affine comes from the sform when present, else the qform, else
/// the pixdim diagonal. Byte-swapped files are rejected.
Volume read_nifti(const std::filesystem::path& path);

/// Writes the canonical form this library produces: float32 samples,
/// sform_code = 1, no qform, slope/inter = 1/0, data at offset 352. Writing
/// is deterministic, so write -> read -> write is byte-identical.
void write_nifti(const Volume& v, const std::filesystem::path& path);

/// Intensity- and grid-normalizes a volume:
///  1. window to [min, 99.9th percentile] (nearest-rank) and rescale to [0,1];
///     a constant volume maps to all zeros;
///  2. resample onto an axis-aligned grid of `target_dims` /
///     `target_voxel` spacing centered on the input's world center
///     (trilinear, zero outside the input).
/// Conforming a volume that already lies on the target grid is exact: the
/// regrid copies voxels bitwise and the recomputed window is [0, 1], so a
/// second pass at the same grid reproduces the first bit for bit. A pass
/// that actually resamples blends the saturated top percentile, so only
/// the same-grid form of idempotence holds.
Volume conform(const Volume& v, std::array<int64_t, 3> target_dims,
               std::array<double, 3> target_voxel);

/// Volume -> [1,1,nz,ny,nx] tensor (same flat layout, W is the volume x axis).
template <class T>
ad::Tensor<T> to_tensor(const Volume& v);

/// Tensor [1,1,D,H,W] -> Volume with dims (W,H,D); grid metadata is copied
/// from `like` (extents may differ, e.g. half-resolution fields).
template <class T>
Volume from_tensor(const ad::Tensor<T>& t, const Volume& like);

extern template ad::Tensor<float> to_tensor<float>(const Volume&);
extern template ad::Tensor<double> to_tensor<double>(const Volume&);
extern template Volume from_tensor<float>(const ad::Tensor<float>&, const Volume&);
extern template Volume from_tensor<double>(const ad::Tensor<double>&, const Volume&);

}  // namespace npp::io
