#pragma once

#include <array>
#include <filesystem>

#include "npp/tensor.hpp"

namespace npp::spatial {

/// Affine map q = A p + t acting on normalized coordinates. Points are
/// ordered (d, h, w), i.e. slowest to fastest varying volume axis, and each
/// component lives in [-1, 1] across the corresponding extent with voxel
/// centers at (2*v + 1)/S - 1 (align_corners = false convention).
struct AffineTransform {
  std::array<double, 9> A{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major 3x3
  std::array<double, 3> t{0, 0, 0};

  static AffineTransform identity() { return {}; }

  std::array<double, 3> apply(const std::array<double, 3>& p) const {
    return {A[0] * p[0] + A[1] * p[1] + A[2] * p[2] + t[0],
            A[3] * p[0] + A[4] * p[1] + A[5] * p[2] + t[1],
            A[6] * p[0] + A[7] * p[1] + A[8] * p[2] + t[2]};
  }
};

double det(const AffineTransform& m);

/// compose(a, b) applies b first: result(p) = a(b(p)).
AffineTransform compose(const AffineTransform& a, const AffineTransform& b);

/// Exact inverse; throws invalid_affine_error when |det| <= 1e-12.
AffineTransform invert(const AffineTransform& m);

/// Normalized coordinate of voxel center v along an axis of extent size.
inline double norm_coord(int64_t v, int64_t size) {
  return (2.0 * static_cast<double>(v) + 1.0) / static_cast<double>(size) - 1.0;
}

/// Source locations for resampling a volume: one normalized (d,h,w) point
/// per output voxel, flattened in output raster order.
template <class T>
struct SamplingGrid {
  ad::Tensor<T> coords;           // [V, 3]
  std::array<int64_t, 3> dims{};  // output extents (D, H, W)
};

/// Grid mapping every output voxel center through a fixed transform.
template <class T>
SamplingGrid<T> affine_grid(const AffineTransform& m, std::array<int64_t, 3> dims);

/// Differentiable variant: A is a tracked [3,3] tensor, t a tracked [3]
/// tensor, so gradients flow back into the transform parameters.
template <class T>
SamplingGrid<T> affine_grid(ad::Tape<T>& g, const ad::Tensor<T>& A, const ad::Tensor<T>& t,
                            std::array<int64_t, 3> dims);

/// Trilinear interpolation of x [N,C,D,H,W] at grid locations, zero outside
/// the input domain. Differentiable in both x and the grid coordinates.
/// Returns [N, C, dims[0], dims[1], dims[2]].
template <class T>
ad::Tensor<T> trilinear_sample(ad::Tape<T>& g, const ad::Tensor<T>& x, const SamplingGrid<T>& grid);

/// Plain-text transform sidecar: the normalized-coordinate A | t pair plus
/// the equivalent voxel-index 4x4 matrix (output voxel (x,y,z,1) -> input
/// voxel) for interoperability.
void write_affine_sidecar(const std::filesystem::path& path, const AffineTransform& m,
                          std::array<int64_t, 3> in_dims, std::array<int64_t, 3> out_dims);

AffineTransform read_affine_sidecar(const std::filesystem::path& path);

/// The voxel-index matrix stored in the sidecar, exposed for verification.
std::array<double, 16> voxel_matrix(const AffineTransform& m, std::array<int64_t, 3> in_dims,
                                    std::array<int64_t, 3> out_dims);

#define NPP_EXTERN_SPATIAL(T)                                                                  \
  extern template SamplingGrid<T> affine_grid<T>(const AffineTransform&,                      \
                                                 std::array<int64_t, 3>);                     \
  extern template SamplingGrid<T> affine_grid<T>(ad::Tape<T>&, const ad::Tensor<T>&,          \
                                                 const ad::Tensor<T>&, std::array<int64_t, 3>); \
  extern template ad::Tensor<T> trilinear_sample<T>(ad::Tape<T>&, const ad::Tensor<T>&,       \
                                                    const SamplingGrid<T>&);

NPP_EXTERN_SPATIAL(float)
NPP_EXTERN_SPATIAL(double)
#undef NPP_EXTERN_SPATIAL

}  // namespace npp::spatial
