#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "npp/param_store.hpp"
#include "npp/spatial.hpp"
#include "npp/tensor.hpp"

namespace npp::model {

enum class Mode { multiplier, direct };

Mode mode_from_string(const std::string& s);
std::string to_string(Mode m);

/// Architecture description. The defaults build the small configuration
/// used throughout the tests; scaling up means raising levels,
/// base_channels and hyper widths together.
struct ModelConfig {
  int levels = 3;
  int base_channels = 8;
  int max_channels = 64;
  int convs_per_level = 2;
  int bottleneck_blocks = 3;
  int heads = 8;
  double mlp_ratio = 1.0;
  double leaky_slope = 0.01;
  int multiplier_downsample = 2;  // 1 = full-resolution field, 2 = half
  Mode mode = Mode::multiplier;
  std::vector<int> hyper_hidden{64, 256};

  int channels_at(int level) const;
  int embed_dim() const { return channels_at(levels - 1); }

  /// Number of upsampling stages in the decoder.
  int decoder_stages() const;

  /// Channel count of every conditioned decoder convolution, in execution
  /// order.
  std::vector<int> conditioned_channels() const;

  /// Output width of the conditioning network: a scale and a shift per
  /// conditioned channel.
  int hyper_out() const;

  void validate() const;  // throws config_error
};

template <class T>
struct NppModel {
  ModelConfig config;
  ad::ParamStore<T> params;
};

/// Builds a model with freshly initialized parameters. Weights and biases
/// draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); normalization gains start
/// at one, shifts at zero. The final layers of the conditioning network and
/// of the pose head start at exactly zero so that conditioning is the
/// identity and the predicted transform is the identity at initialization.
template <class T>
NppModel<T> build_model(const ModelConfig& config, uint64_t seed);

template <class T>
struct NppOutput {
  ad::Tensor<T> chi;         // multiplier field at native head resolution; empty in direct mode
  ad::Tensor<T> chi_full;    // chi upsampled to the input grid; empty in direct mode
  ad::Tensor<T> translated;  // intensity-normalized, skull-suppressed image
  ad::Tensor<T> phi_raw;     // [12] pose head output (A - I | t), tracked
  spatial::AffineTransform phi;
  ad::Tensor<T> warped;      // translated resampled through phi; == translated if !apply_warp
};

/// Multiplier-field prediction alone (χ head). Only valid in multiplier
/// mode. `lambda` conditions the decoder through the hypernetwork.
template <class T>
ad::Tensor<T> predict_multiplier(ad::Tape<T>& g, const ModelConfig& config,
                                 const ad::ParamStore<T>& params, const ad::Tensor<T>& x,
                                 double lambda);

/// Elementwise product of x with the (upsampled) multiplier field.
template <class T>
ad::Tensor<T> apply_multiplier(ad::Tape<T>& g, const ad::Tensor<T>& x, const ad::Tensor<T>& chi);

/// Applies λ-conditioned per-channel scale and shift to decoder features.
/// `layer_index` selects the slice of the conditioning vector belonging to
/// this convolution. `hyper` is the full conditioning-network output.
template <class T>
ad::Tensor<T> hyper_condition(ad::Tape<T>& g, const ad::Tensor<T>& z, const ad::Tensor<T>& hyper,
                              int layer_index, const ModelConfig& config);

/// Conditioning-network forward: maps log10(lambda) to the per-channel
/// scale/shift vector. Throws domain_error when lambda <= 0.
template <class T>
ad::Tensor<T> hyper_forward(ad::Tape<T>& g, const ModelConfig& config,
                            const ad::ParamStore<T>& params, double lambda);

/// Pose head: bottleneck features -> 12 bounded parameters -> transform
/// A = I + raw[0:9], t = raw[9:12]. Returns the raw tensor (tracked) and
/// the transform as plain numbers.
template <class T>
std::pair<ad::Tensor<T>, spatial::AffineTransform> stn_affine(ad::Tape<T>& g,
                                                              const ad::Tensor<T>& bottleneck,
                                                              const ad::ParamStore<T>& params);

/// Full pipeline: χ (or direct translation), pose, optional warp.
/// x must be [1,1,D,H,W] with spatial extents divisible by 2^(levels-1).
template <class T>
NppOutput<T> forward(ad::Tape<T>& g, const ModelConfig& config, const ad::ParamStore<T>& params,
                     const ad::Tensor<T>& x, double lambda, bool apply_warp = true);

#define NPP_EXTERN_MODEL(T)                                                                     \
  extern template NppModel<T> build_model<T>(const ModelConfig&, uint64_t);                     \
  extern template ad::Tensor<T> predict_multiplier<T>(ad::Tape<T>&, const ModelConfig&,         \
                                                      const ad::ParamStore<T>&,                 \
                                                      const ad::Tensor<T>&, double);            \
  extern template ad::Tensor<T> apply_multiplier<T>(ad::Tape<T>&, const ad::Tensor<T>&,         \
                                                    const ad::Tensor<T>&);                      \
  extern template ad::Tensor<T> hyper_condition<T>(ad::Tape<T>&, const ad::Tensor<T>&,          \
                                                   const ad::Tensor<T>&, int,                   \
                                                   const ModelConfig&);                         \
  extern template ad::Tensor<T> hyper_forward<T>(ad::Tape<T>&, const ModelConfig&,              \
                                                 const ad::ParamStore<T>&, double);             \
  extern template std::pair<ad::Tensor<T>, spatial::AffineTransform> stn_affine<T>(             \
      ad::Tape<T>&, const ad::Tensor<T>&, const ad::ParamStore<T>&);                           \
  extern template NppOutput<T> forward<T>(ad::Tape<T>&, const ModelConfig&,                     \
                                          const ad::ParamStore<T>&, const ad::Tensor<T>&,       \
                                          double, bool);

NPP_EXTERN_MODEL(float)
NPP_EXTERN_MODEL(double)
#undef NPP_EXTERN_MODEL

}  // namespace npp::model
