#include "npp/hash.hpp"

#include <cstdio>
#include <fstream>
#include <vector>

#include "npp/errors.hpp"

namespace npp {

uint64_t fnv1a64_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open for checksum: " + path.string());
  uint64_t h = 0xcbf29ce484222325ull;
  std::vector<char> buf(1 << 16);
  while (f) {
    f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const std::streamsize got = f.gcount();
    if (got > 0) h = fnv1a64(buf.data(), static_cast<size_t>(got), h);
  }
  return h;
}

std::string hex64(uint64_t value) {
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(value));
  return std::string(out);
}

}  // namespace npp
