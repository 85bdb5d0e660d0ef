#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "npp/volume.hpp"

namespace npp::metrics {

/// Voxelwise binary segmentation on a regular grid. `voxel_size` feeds the
/// surface-distance computations (distances are in millimeters).
struct BinaryMask {
  std::array<int64_t, 3> dims{0, 0, 0};       // (nx, ny, nz)
  std::array<double, 3> voxel_size{1, 1, 1};  // mm
  std::vector<uint8_t> bits;                  // 0/1, x-fastest like Volume

  int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
  bool at(int64_t i, int64_t j, int64_t k) const {
    return bits[static_cast<size_t>(i + dims[0] * (j + dims[1] * k))] != 0;
  }
  int64_t count() const;
};

struct SurfaceStats {
  double msd = 0;   // mean symmetric surface distance, mm
  double rmsd = 0;  // root mean square surface distance, mm
  double hd = 0;    // Hausdorff (max) surface distance, mm
};

struct SensSpec {
  double sens = 0;  // TP/(TP+FN); NaN when gt has no positives
  double spec = 0;  // TN/(TN+FP); NaN when gt has no negatives
};

/// 2|A∩B| / (|A|+|B|). Two empty masks count as a perfect match (1).
/// Throws shape_error on extent mismatch.
double dice(const BinaryMask& a, const BinaryMask& b);

/// Sensitivity and specificity of `pred` against `gt`. A class absent from
/// `gt` makes the corresponding rate undefined and is reported as NaN.
SensSpec sens_spec(const BinaryMask& pred, const BinaryMask& gt);

/// Symmetric surface distances between the masks' boundaries. A surface voxel
/// is a mask voxel with at least one of its 6 face neighbors outside the mask
/// (volume borders count as outside). Each surface voxel of one mask is
/// matched to the nearest surface voxel of the other; both directions are
/// pooled for msd/rmsd, and hd is the max over both. Distances are Euclidean
/// between voxel centers, scaled by voxel_size per axis.
/// Throws undefined_metric_error if either mask is empty.
SurfaceStats surface_distances(const BinaryMask& a, const BinaryMask& b);

/// 10*log10(peak^2 / MSE), capped at 99 dB when MSE < 1e-12.
double psnr(const io::Volume& a, const io::Volume& b, double peak = 1.0);

/// Mean structural similarity with the same 7^3 Gaussian window and
/// stabilizers as the training loss; equals 1 - ssim_loss(a, b).
double ssim_metric(const io::Volume& a, const io::Volume& b);

/// Mean SSIM restricted to windows whose center voxel lies inside `region`.
/// Used for bias-field comparison where only brain voxels carry signal.
/// Throws undefined_metric_error if no window center falls in the region.
double masked_ssim(const io::Volume& a, const io::Volume& b, const BinaryMask& region);

/// Brain mask recovered from a model output: voxels above 1% of the volume's
/// intensity range, reduced to the largest 6-connected component. A constant
/// volume yields an empty mask.
BinaryMask brain_mask_from_output(const io::Volume& v);

/// Largest 6-connected component of the mask (empty input stays empty).
BinaryMask largest_component(const BinaryMask& m);

}  // namespace npp::metrics
