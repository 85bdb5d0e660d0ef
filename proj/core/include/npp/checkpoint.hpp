#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include "npp/model.hpp"
#include "npp/training.hpp"

namespace npp::training {

/// Complete optimization snapshot. `epoch` counts completed epochs, so a
/// resumed run continues at exactly this epoch; `grid_dims` records the
/// (nx,ny,nz) extents the model was trained on.
struct Checkpoint {
  model::ModelConfig model_config;
  TrainConfig train_config;
  std::array<int64_t, 3> grid_dims{0, 0, 0};
  int64_t epoch = 0;
  int64_t step = 0;
  ad::ParamStore<float> params;
  OptState opt;
  std::string rng_state;
};

/// Binary, little-endian, magic "NPPCKPT1". Parameters are stored as named
/// float32 blobs in name order; Adam moments follow in the same order.
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);

/// Throws io_error when unreadable, format_error on corruption or an
/// unrecognized magic/version.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace npp::training
