#include "run_manifest.hpp"

#include <cstdio>
#include <fstream>

#include "npp/errors.hpp"
#include "npp/hash.hpp"

namespace npp::cli {

void write_run_manifest(const RunManifest& m, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot write run manifest: " + path.string());
  f << "npp-run 1\n";
  f << "command " << m.command << "\n";
  f << "config_hash " << hex64(m.config_hash) << "\n";
  f << "seed " << m.seed << "\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "duration_ms %.3f\n", m.duration_ms);
  f << buf;
  for (const std::string& in : m.inputs) f << "input " << in << "\n";
  for (const std::filesystem::path& out : m.outputs)
    f << "output " << hex64(fnv1a64_file(out)) << " " << out.generic_string() << "\n";
  if (!f) throw io_error("failed writing run manifest: " + path.string());
}

}  // namespace npp::cli
