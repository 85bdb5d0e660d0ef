#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "npp/phantom.hpp"

namespace npp::dataset {

struct Entry {
  uint64_t seed = 0;
  std::string dir;  // sample directory, relative to the manifest location
  spatial::AffineTransform phi;
};

/// Plain-text index of a synthesized dataset. The spec hash ties the files
/// to the generation parameters so stale mixes are caught on load.
struct Manifest {
  uint64_t spec_hash = 0;
  std::array<int64_t, 3> dims{0, 0, 0};
  std::vector<Entry> entries;
};

/// Generates `count` phantoms with seeds seed0, seed0+1, ... and writes one
/// directory per sample plus `manifest.txt` under out_dir. Returns the
/// manifest it wrote.
Manifest synth_dataset(const phantom::PhantomSpec& spec, int64_t count, uint64_t seed0,
                       const std::filesystem::path& out_dir);

void write_manifest(const Manifest& m, const std::filesystem::path& path);

/// Parses a manifest; malformed input raises format_error naming the line.
Manifest read_manifest(const std::filesystem::path& path);

/// Writes x, x_gt, bias_gt, mask_gt, mask_in_x as NIfTI files into `dir`.
void save_sample(const phantom::PhantomSample& s, const std::filesystem::path& dir);

/// Loads the sample of `m.entries[index]`; `root` is the manifest's
/// directory. The transform and seed come from the manifest itself.
phantom::PhantomSample load_sample(const Manifest& m, size_t index,
                                   const std::filesystem::path& root);

}  // namespace npp::dataset
