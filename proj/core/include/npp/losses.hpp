#pragma once

#include "npp/model.hpp"
#include "npp/tensor.hpp"

namespace npp::losses {

/// 1 - mean SSIM between two single-channel volumes with values nominally
/// in [0, 1]. Local statistics use a Gaussian window (default 7^3, sigma
/// 1.5) evaluated only where the window fits entirely inside the volume,
/// so every spatial extent must be >= `window`. Stabilizers follow the
/// standard choice C1 = 0.01^2, C2 = 0.03^2 for unit dynamic range.
/// Perfectly equal inputs give exactly 0.
template <class T>
ad::Tensor<T> ssim_loss(ad::Tape<T>& g, const ad::Tensor<T>& a, const ad::Tensor<T>& b,
                        int window = 7, double sigma = 1.5);

/// Mean anisotropic total variation of the field (sum of absolute forward
/// differences along the three spatial axes over the voxel count).
template <class T>
ad::Tensor<T> tv_loss(ad::Tape<T>& g, const ad::Tensor<T>& chi);

/// Scalar record of one objective evaluation. total is reconstructed in
/// double as rec + lambda_weight * tv.
struct LossBreakdown {
  double rec = 0.0;
  double tv = 0.0;
  double lambda_weight = 0.0;
  double total = 0.0;
};

template <class T>
struct Objective {
  ad::Tensor<T> total;  // backpropagation target
  ad::Tensor<T> rec;
  ad::Tensor<T> tv;  // constant zero when the model emits no field
  double lambda = 0.0;

  LossBreakdown breakdown() const {
    LossBreakdown b;
    b.rec = static_cast<double>(rec.scalar());
    b.tv = static_cast<double>(tv.scalar());
    b.lambda_weight = lambda;
    b.total = b.rec + lambda * b.tv;
    return b;
  }
};

/// rec + lambda * tv, where rec compares the model output (after warping)
/// against the ground-truth target and tv regularizes the multiplier field
/// at its native resolution. In direct mode the tv term is zero.
template <class T>
Objective<T> npp_objective(ad::Tape<T>& g, const model::NppOutput<T>& out,
                           const ad::Tensor<T>& x_gt, double lambda);

#define NPP_EXTERN_LOSSES(T)                                                            \
  extern template ad::Tensor<T> ssim_loss<T>(ad::Tape<T>&, const ad::Tensor<T>&,       \
                                             const ad::Tensor<T>&, int, double);       \
  extern template ad::Tensor<T> tv_loss<T>(ad::Tape<T>&, const ad::Tensor<T>&);        \
  extern template Objective<T> npp_objective<T>(ad::Tape<T>&, const model::NppOutput<T>&, \
                                                const ad::Tensor<T>&, double);

NPP_EXTERN_LOSSES(float)
NPP_EXTERN_LOSSES(double)
#undef NPP_EXTERN_LOSSES

}  // namespace npp::losses
