#include "npp/dataset.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "npp/errors.hpp"
#include "npp/hash.hpp"

namespace npp::dataset {

namespace {

metrics::BinaryMask mask_from_volume(const io::Volume& v) {
  metrics::BinaryMask m;
  m.dims = v.dims;
  m.voxel_size = v.voxel_size;
  m.bits.resize(v.data.size());
  for (size_t i = 0; i < v.data.size(); ++i) m.bits[i] = v.data[i] > 0.5f ? 1 : 0;
  return m;
}

io::Volume mask_to_volume(const metrics::BinaryMask& m) {
  io::Volume v = io::make_volume(m.dims, 0.0f, m.voxel_size);
  for (size_t i = 0; i < m.bits.size(); ++i) v.data[i] = m.bits[i] ? 1.0f : 0.0f;
  return v;
}

}  // namespace

void save_sample(const phantom::PhantomSample& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_nifti(s.x, dir / "x.nii");
  io::write_nifti(s.x_gt, dir / "x_gt.nii");
  io::write_nifti(s.bias_gt, dir / "bias_gt.nii");
  io::write_nifti(mask_to_volume(s.mask_gt), dir / "mask_gt.nii");
  io::write_nifti(mask_to_volume(s.mask_in_x), dir / "mask_in_x.nii");
}

phantom::PhantomSample load_sample(const Manifest& m, size_t index,
                                   const std::filesystem::path& root) {
  if (index >= m.entries.size())
    throw domain_error("dataset: sample index " + std::to_string(index) + " out of range");
  const Entry& e = m.entries[index];
  const std::filesystem::path dir = root / e.dir;
  phantom::PhantomSample s;
  s.seed = e.seed;
  s.phi_gt = e.phi;
  s.x = io::read_nifti(dir / "x.nii");
  s.x_gt = io::read_nifti(dir / "x_gt.nii");
  s.bias_gt = io::read_nifti(dir / "bias_gt.nii");
  s.mask_gt = mask_from_volume(io::read_nifti(dir / "mask_gt.nii"));
  s.mask_in_x = mask_from_volume(io::read_nifti(dir / "mask_in_x.nii"));
  return s;
}

Manifest synth_dataset(const phantom::PhantomSpec& spec, int64_t count, uint64_t seed0,
                       const std::filesystem::path& out_dir) {
  if (count <= 0) throw domain_error("synth_dataset: count must be positive");
  std::filesystem::create_directories(out_dir);
  Manifest m;
  m.spec_hash = phantom::spec_hash(spec);
  m.dims = spec.dims;
  for (int64_t i = 0; i < count; ++i) {
    const uint64_t seed = seed0 + static_cast<uint64_t>(i);
    phantom::PhantomSample s = phantom::generate_phantom(spec, seed);
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%05" PRId64, i);
    save_sample(s, out_dir / name);
    Entry e;
    e.seed = seed;
    e.dir = name;
    e.phi = s.phi_gt;
    m.entries.push_back(std::move(e));
  }
  write_manifest(m, out_dir / "manifest.txt");
  return m;
}

void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot write manifest: " + path.string());
  f << "npp-dataset 1\n";
  f << "spec " << hex64(m.spec_hash) << "\n";
  f << "dims " << m.dims[0] << " " << m.dims[1] << " " << m.dims[2] << "\n";
  f << "count " << m.entries.size() << "\n";
  char num[32];
  for (const Entry& e : m.entries) {
    f << "sample " << e.seed << " " << e.dir;
    for (double a : e.phi.A) {
      std::snprintf(num, sizeof(num), " %.17g", a);
      f << num;
    }
    for (double t : e.phi.t) {
      std::snprintf(num, sizeof(num), " %.17g", t);
      f << num;
    }
    f << "\n";
  }
  if (!f) throw io_error("failed writing manifest: " + path.string());
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open manifest: " + path.string());
  auto fail = [&](int line, const std::string& why) {
    throw format_error(path.string() + ":" + std::to_string(line) + ": " + why);
  };

  Manifest m;
  std::string line;
  int ln = 0;
  size_t count = 0;

  auto next_line = [&](const char* what) {
    if (!std::getline(f, line)) fail(ln + 1, std::string("missing ") + what);
    ++ln;
  };

  next_line("header");
  if (line != "npp-dataset 1") fail(ln, "unrecognized header '" + line + "'");
  next_line("spec hash");
  {
    std::istringstream is(line);
    std::string key, hex;
    if (!(is >> key >> hex) || key != "spec" || hex.size() != 16)
      fail(ln, "expected 'spec <16-hex-digit hash>'");
    m.spec_hash = std::stoull(hex, nullptr, 16);
  }
  next_line("dims");
  {
    std::istringstream is(line);
    std::string key;
    if (!(is >> key >> m.dims[0] >> m.dims[1] >> m.dims[2]) || key != "dims")
      fail(ln, "expected 'dims <nx> <ny> <nz>'");
  }
  next_line("count");
  {
    std::istringstream is(line);
    std::string key;
    if (!(is >> key >> count) || key != "count") fail(ln, "expected 'count <n>'");
  }
  while (std::getline(f, line)) {
    ++ln;
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string key;
    Entry e;
    is >> key;
    if (key != "sample") fail(ln, "expected 'sample', got '" + key + "'");
    if (!(is >> e.seed >> e.dir)) fail(ln, "truncated sample record");
    for (double& a : e.phi.A)
      if (!(is >> a)) fail(ln, "truncated affine in sample record");
    for (double& t : e.phi.t)
      if (!(is >> t)) fail(ln, "truncated translation in sample record");
    m.entries.push_back(std::move(e));
  }
  if (m.entries.size() != count)
    fail(ln, "count says " + std::to_string(count) + " but found " +
                 std::to_string(m.entries.size()) + " samples");
  return m;
}

}  // namespace npp::dataset
