#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "npp/model.hpp"
#include "npp/phantom.hpp"
#include "npp/training.hpp"

namespace npp::cli {

/// Sectioned key-value configuration:
///
///   [train]
///   lr0 = 1e-4        # comment
///
/// Keys are addressed as "section.key". Every diagnostic names the file and
/// line. Typed getters mark keys consumed; require_consumed() turns leftover
/// (misspelled) keys into errors.
class Config {
 public:
  static Config parse_file(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback);
  std::string get_string_required(const std::string& key);
  double get_double(const std::string& key, double fallback);
  int64_t get_int(const std::string& key, int64_t fallback);
  uint64_t get_u64(const std::string& key, uint64_t fallback);
  std::array<int64_t, 3> get_dims(const std::string& key, std::array<int64_t, 3> fallback);
  std::vector<int> get_int_list(const std::string& key, std::vector<int> fallback);

  void require_consumed() const;

  /// FNV-1a of the raw file bytes.
  uint64_t content_hash() const { return content_hash_; }
  const std::filesystem::path& source() const { return source_; }

  /// Resolves a configured path relative to the config file's directory.
  std::filesystem::path resolve(const std::string& p) const;

 private:
  struct Value {
    std::string text;
    int line = 0;
    mutable bool consumed = false;
  };
  [[noreturn]] void fail(const std::string& key, const std::string& why) const;
  const Value* find(const std::string& key);

  std::map<std::string, Value> values_;
  std::filesystem::path source_;
  uint64_t content_hash_ = 0;
};

/// Section [model]; unset keys keep the struct defaults.
model::ModelConfig model_config_from(Config& c);

/// Section [train].
training::TrainConfig train_config_from(Config& c);

/// Section [phantom].
phantom::PhantomSpec phantom_spec_from(Config& c);

}  // namespace npp::cli
