#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "npp/dataset.hpp"
#include "npp/model.hpp"
#include "npp/rng.hpp"

namespace npp::training {

struct TrainConfig {
  double lr0 = 1e-4;
  int max_epochs = 40;
  int halve_epoch = 20;  // learning rate halves from this epoch on
  int batch_size = 2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda_log10_lo = -3.0;
  double lambda_log10_hi = 1.0;
  uint64_t seed = 0;
  int checkpoint_every = 10;  // epochs; the final epoch always checkpoints

  // Diagnostic hook: a positive value pins every batch's λ instead of
  // sampling, e.g. for overfitting probes. Leave at 0 for the real recipe.
  double fixed_lambda = 0.0;

  void validate() const;  // throws config_error
};

/// Adam accumulators, keyed like the ParamStore they update.
struct OptState {
  uint64_t step = 0;
  std::map<std::string, std::vector<float>> m;
  std::map<std::string, std::vector<float>> v;
};

/// One regularization weight per mini-batch: 10^u with u uniform in the
/// configured log10 range.
double sample_lambda(Rng& rng, const TrainConfig& cfg);

/// lr0 until halve_epoch, lr0/2 afterwards.
double lr_at_epoch(int epoch, const TrainConfig& cfg);

/// Standard Adam with bias correction. Verifies every gradient is finite
/// before touching any state; a non-finite value raises abort_step_error
/// and leaves parameters, moments and the step count unchanged.
void adam_step(ad::ParamStore<float>& params,
               const std::map<std::string, std::vector<float>>& grads, OptState& state, double lr,
               const TrainConfig& cfg);

struct TrainPaths {
  std::filesystem::path data_root;        // directory holding manifest + samples
  std::filesystem::path log_path;         // one text record per step
  std::filesystem::path checkpoint_path;  // overwritten at every save point
};

struct TrainResult {
  int64_t steps = 0;
  int64_t skipped_steps = 0;
  double first_epoch_mean_total = 0.0;
  double last_epoch_mean_total = 0.0;
};

/// Full optimization loop: shuffle, gamma-augment, draw λ per batch,
/// forward, SSIM + λ·TV objective, backward, Adam. Checkpoints capture
/// parameters, optimizer state and the RNG stream, so resuming reproduces
/// the uninterrupted run bit-exactly. A non-finite loss aborts after
/// dumping the offending batch next to the checkpoint; persistent
/// non-finite gradients (more than 10 consecutive skips) abort as well.
TrainResult train(model::NppModel<float>& m, const dataset::Manifest& data,
                  const TrainConfig& cfg, const TrainPaths& paths,
                  const std::optional<std::filesystem::path>& resume_from = std::nullopt);

}  // namespace npp::training
