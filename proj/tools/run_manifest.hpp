#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace npp::cli {

/// Provenance record emitted by every subcommand: what ran, on which
/// inputs, with which seed, and the checksum of every artifact it wrote.
struct RunManifest {
  std::string command;
  uint64_t config_hash = 0;  // 0 when the command took no config file
  uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::filesystem::path> outputs;
  double duration_ms = 0;
};

/// Writes `run_manifest.txt`; output checksums are computed here.
void write_run_manifest(const RunManifest& m, const std::filesystem::path& path);

/// Wall-clock helper.
class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double elapsed_ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace npp::cli
