#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

namespace npp {

/// FNV-1a, 64 bit. Used for artifact checksums in run manifests and for
/// quick content-distinctness checks in tests.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

uint64_t fnv1a64_file(const std::filesystem::path& path);

std::string hex64(uint64_t value);

}  // namespace npp
