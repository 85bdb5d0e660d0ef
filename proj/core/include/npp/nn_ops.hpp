#pragma once

#include <array>

#include "npp/param_store.hpp"
#include "npp/tensor.hpp"
#include "npp/tensor_ops.hpp"

// Volumetric network building blocks. Volumes are rank-5 tensors in
// [N, C, D, H, W] layout with W contiguous.

namespace npp::ad {

/// 3-d cross-correlation with odd kernel extents, symmetric zero padding
/// and a per-filter bias. Output extent along each axis must divide
/// exactly: (S + 2*pad - k) must be a multiple of stride, otherwise a
/// shape_error is thrown rather than silently truncating.
template <class T>
Tensor<T> conv3d(Tape<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride = 1, int pad = 0);

/// Per-(sample, channel) normalization over all voxels, then a learned
/// per-channel scale and shift.
template <class T>
Tensor<T> instance_norm3d(Tape<T>& g, const Tensor<T>& x, const Tensor<T>& gamma,
                          const Tensor<T>& beta, double eps = 1e-5);

/// 2x2x2 mean pooling; every spatial extent must be even.
template <class T>
Tensor<T> avg_pool2x(Tape<T>& g, const Tensor<T>& x);

/// Doubles every spatial extent by trilinear interpolation with voxel
/// centers aligned (align_corners = false semantics, edges clamped).
template <class T>
Tensor<T> upsample_trilinear2x(Tape<T>& g, const Tensor<T>& x);

/// [N,C,D,H,W] -> [N,C] spatial mean.
template <class T>
Tensor<T> global_avg_pool(Tape<T>& g, const Tensor<T>& x);

/// Concatenates along the channel axis; all other extents must agree.
template <class T>
Tensor<T> concat_channels(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& b);

/// y[n,c,...] = alpha[c] * z[n,c,...] + beta[c].
template <class T>
Tensor<T> channel_affine(Tape<T>& g, const Tensor<T>& z, const Tensor<T>& alpha,
                         const Tensor<T>& beta);

/// Mean anisotropic total variation: sum of absolute forward differences
/// along D, H and W divided by the voxel count N*C*D*H*W. Returns [1].
template <class T>
Tensor<T> tv3d(Tape<T>& g, const Tensor<T>& x);

/// Pre-norm transformer encoder block on a [T, E] token matrix:
///   u = x + MHSA(LN(x)),  y = u + MLP(LN(u))
/// Attention is multi-head with per-head scale 1/sqrt(E/heads); the MLP is
/// linear-ReLU-linear. Parameters are read from `p` under the names
/// ln1.{g,b}, attn.{q,k,v,o}.{w,b}, ln2.{g,b}, mlp.{f0,f1}.{w,b}.
template <class T>
Tensor<T> attention_block(Tape<T>& g, const Tensor<T>& x, int heads, const ParamSlice<T>& p);

#define NPP_EXTERN_NN_OPS(T)                                                                     \
  extern template Tensor<T> conv3d<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                      const Tensor<T>&, int, int);                              \
  extern template Tensor<T> instance_norm3d<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                               const Tensor<T>&, double);                       \
  extern template Tensor<T> avg_pool2x<T>(Tape<T>&, const Tensor<T>&);                          \
  extern template Tensor<T> upsample_trilinear2x<T>(Tape<T>&, const Tensor<T>&);                \
  extern template Tensor<T> global_avg_pool<T>(Tape<T>&, const Tensor<T>&);                     \
  extern template Tensor<T> concat_channels<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);   \
  extern template Tensor<T> channel_affine<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                              const Tensor<T>&);                                \
  extern template Tensor<T> tv3d<T>(Tape<T>&, const Tensor<T>&);                                \
  extern template Tensor<T> attention_block<T>(Tape<T>&, const Tensor<T>&, int,                 \
                                               const ParamSlice<T>&);

NPP_EXTERN_NN_OPS(float)
NPP_EXTERN_NN_OPS(double)
#undef NPP_EXTERN_NN_OPS

}  // namespace npp::ad
