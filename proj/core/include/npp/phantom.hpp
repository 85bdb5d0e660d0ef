#pragma once

#include <array>
#include <cstdint>

#include "npp/metrics.hpp"
#include "npp/rng.hpp"
#include "npp/spatial.hpp"
#include "npp/volume.hpp"

namespace npp::phantom {

/// Ranges controlling synthetic head generation. All intensity values live
/// in [0, 1]; lengths are voxels unless noted.
struct PhantomSpec {
  std::array<int64_t, 3> dims{32, 32, 32};

  // Brain: ellipsoid semi-axes as fractions of the half extent, filled with
  // a smooth texture in [0.2, 0.8] that fades over ~1 voxel at the surface.
  double brain_axis_lo = 0.45;
  double brain_axis_hi = 0.60;
  double texture_sigma = 3.0;

  // Skull: shell at a 1-voxel gap outside the brain surface.
  double skull_thickness_lo = 2.0;
  double skull_thickness_hi = 3.0;
  double skull_intensity_lo = 0.7;
  double skull_intensity_hi = 1.0;

  // Multiplicative bias field.
  double bias_sigma = 8.0;
  double bias_amplitude = 0.3;

  // Pose of the head inside the input volume.
  double rot_deg = 15.0;
  double scale_lo = 0.9;
  double scale_hi = 1.1;
  double translate = 0.1;  // normalized units

  double noise_sigma = 0.01;

  void validate() const;  // throws config_error
};

/// One supervised example. `x` is the observed head (posed, biased, noisy);
/// the remaining fields are the exact generation targets. mask_in_x marks
/// brain voxels of `x` itself (mask_gt carried through phi_gt), used for
/// brain-restricted comparisons on the input grid.
struct PhantomSample {
  io::Volume x;        // input pose
  io::Volume x_gt;     // stripped, bias-free brain on the atlas grid
  io::Volume bias_gt;  // multiplicative field on the input grid
  metrics::BinaryMask mask_gt;    // brain voxels, atlas grid
  metrics::BinaryMask mask_in_x;  // brain voxels, input grid
  spatial::AffineTransform phi_gt;  // sampling map: input voxel -> atlas point
  uint64_t seed = 0;
};

/// Deterministic synthesis. Each stage (geometry, texture, pose, bias,
/// noise) draws from its own seed-derived stream, so disabling one stage
/// (e.g. bias_amplitude = 0) leaves the others bit-identical.
PhantomSample generate_phantom(const PhantomSpec& spec, uint64_t seed);

/// Smooth positive field: white noise blurred by a Gaussian of the given
/// sigma, rescaled to [1-amplitude, 1+amplitude], then divided by its mean.
/// amplitude = 0 gives the constant 1 field.
io::Volume synth_bias_field(std::array<int64_t, 3> dims, double sigma, double amplitude,
                            uint64_t seed);

/// Random pose: A = R0(a0) R1(a1) R2(a2) diag(s), t componentwise uniform.
/// Rotations are about the normalized (d,h,w) axes; det(A) > 0 always.
spatial::AffineTransform random_affine(const PhantomSpec& spec, uint64_t seed);

/// Elementwise x^g. Throws domain_error if x has values outside [0, 1].
io::Volume gamma_apply(const io::Volume& x, double g);

/// Draws ln g uniform in (-0.3, 0.3).
double sample_gamma(Rng& rng);

/// gamma_apply with a freshly drawn exponent.
io::Volume gamma_augment(const io::Volume& x, uint64_t seed);

/// Stable content hash of the generation parameters, recorded in dataset
/// manifests so stale data is detected.
uint64_t spec_hash(const PhantomSpec& spec);

}  // namespace npp::phantom
