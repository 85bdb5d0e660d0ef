#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"

// End-to-end coverage of the command-line tool: exit codes, required
// arguments, file outputs and determinism of whole runs. The binary path
// comes from the build system.

namespace {

namespace fs = std::filesystem;
using namespace npp;

std::string cli_path() { return NPP_CLI_PATH; }

/// Runs the tool with `args`, sending stdout+stderr to `log` (or /dev/null
/// when empty). Returns the process exit code.
int run_cli(const std::string& args, const fs::path& log = {}) {
  const std::string sink = log.empty() ? "/dev/null" : log.string();
  const std::string cmd = "'" + cli_path() + "' " + args + " >'" + sink + "' 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

void write_text(const fs::path& p, const std::string& text) {
  std::vector<unsigned char> bytes(text.begin(), text.end());
  test::write_bytes(p, bytes);
}

/// Phantom config shared by the CLI tests: small volumes keep runs fast.
std::string phantom_cfg(int extent) {
  const std::string e = std::to_string(extent);
  return "[phantom]\ndims = " + e + " " + e + " " + e + "\n";
}

int synth(const fs::path& out, int count, int seed, const fs::path& cfg) {
  return run_cli("synth --out '" + out.string() + "' --count " + std::to_string(count) +
                 " --seed " + std::to_string(seed) + " --config '" + cfg.string() + "'");
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("help succeeds and argument errors exit with the usage code") {
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("synth --help") == 0);
  CHECK(run_cli("") == 1);                       // a subcommand is required
  CHECK(run_cli("frobnicate") == 1);             // unknown subcommand
  CHECK(run_cli("synth") == 1);                  // --out is required
  CHECK(run_cli("synth --out x --count 0") == 1);  // count must be positive
  CHECK(run_cli("preprocess --in a --out b") == 1);  // --checkpoint missing
  CHECK(run_cli("gradcheck --bogus-flag") == 1);
}

TEST_CASE("synth writes the expected files, byte-identically across reruns") {
  test::ScratchDir tmp("cli_synth");
  write_text(tmp / "p.cfg", phantom_cfg(12));

  REQUIRE(synth(tmp / "a", 2, 42, tmp / "p.cfg") == 0);
  REQUIRE(synth(tmp / "b", 2, 42, tmp / "p.cfg") == 0);

  const fs::path a = tmp / "a";
  CHECK(fs::exists(a / "manifest.txt"));
  CHECK(fs::exists(a / "run_manifest.txt"));
  for (const char* dir : {"sample_00000", "sample_00001"})
    for (const char* leaf : {"x.nii", "x_gt.nii", "bias_gt.nii", "mask_gt.nii", "mask_in_x.nii"})
      CHECK(fs::exists(a / dir / leaf));

  const fs::path b = tmp / "b";
  CHECK(test::files_equal(a / "manifest.txt", b / "manifest.txt"));
  for (const char* leaf : {"x.nii", "x_gt.nii", "bias_gt.nii", "mask_gt.nii", "mask_in_x.nii"})
    CHECK(test::files_equal(a / "sample_00000" / leaf, b / "sample_00000" / leaf));

  // A different seed changes the data.
  REQUIRE(synth(tmp / "c", 2, 43, tmp / "p.cfg") == 0);
  CHECK(!test::files_equal(a / "sample_00000" / "x.nii", tmp / "c" / "sample_00000" / "x.nii"));
}

TEST_CASE("--out can come from the environment") {
  test::ScratchDir tmp("cli_env");
  write_text(tmp / "p.cfg", phantom_cfg(12));
  const std::string cmd = "NPP_OUT='" + (tmp / "d").string() + "' '" + cli_path() +
                          "' synth --count 1 --seed 5 --config '" + (tmp / "p.cfg").string() +
                          "' >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  CHECK(WEXITSTATUS(status) == 0);
  CHECK(fs::exists(tmp / "d" / "manifest.txt"));
}

TEST_CASE("train, preprocess and evaluate round trip through the filesystem") {
  test::ScratchDir tmp("cli_e2e");
  write_text(tmp / "p.cfg", phantom_cfg(16));
  REQUIRE(synth(tmp / "data", 2, 7, tmp / "p.cfg") == 0);

  // The data.manifest path is resolved relative to the config file.
  write_text(tmp / "train.cfg",
             "[model]\n"
             "levels = 2\n"
             "base_channels = 4\n"
             "heads = 2\n"
             "bottleneck_blocks = 1\n"
             "hyper_hidden = 8\n"
             "[train]\n"
             "lr0 = 1e-3\n"
             "max_epochs = 1\n"
             "batch_size = 2\n"
             "checkpoint_every = 1\n"
             "seed = 11\n"
             "fixed_lambda = 0.1\n"
             "[data]\n"
             "manifest = data/manifest.txt\n");
  REQUIRE(run_cli("train --config '" + (tmp / "train.cfg").string() + "' --out '" +
                  (tmp / "run").string() + "'") == 0);
  const fs::path ckpt = tmp / "run" / "model.ckpt";
  CHECK(fs::exists(ckpt));
  CHECK(fs::exists(tmp / "run" / "train_log.txt"));
  CHECK(fs::exists(tmp / "run" / "run_manifest.txt"));

  const fs::path x0 = tmp / "data" / "sample_00000" / "x.nii";

  SUBCASE("default preprocess outputs") {
    REQUIRE(run_cli("preprocess --in '" + x0.string() + "' --checkpoint '" + ckpt.string() +
                    "' --out '" + (tmp / "prep").string() + "'") == 0);
    CHECK(fs::exists(tmp / "prep" / "stripped.nii"));
    CHECK(fs::exists(tmp / "prep" / "chi.nii"));
    CHECK(fs::exists(tmp / "prep" / "atlas.nii"));
    CHECK(fs::exists(tmp / "prep" / "affine.txt"));
    CHECK(fs::exists(tmp / "prep" / "run_manifest.txt"));
    CHECK(!fs::exists(tmp / "prep" / "mask.nii"));
  }

  SUBCASE("output toggles add the mask and drop the spatial outputs") {
    REQUIRE(run_cli("preprocess --in '" + x0.string() + "' --checkpoint '" + ckpt.string() +
                    "' --out '" + (tmp / "prep2").string() +
                    "' --no-spatial-norm --emit-mask") == 0);
    CHECK(fs::exists(tmp / "prep2" / "stripped.nii"));
    CHECK(fs::exists(tmp / "prep2" / "mask.nii"));
    CHECK(!fs::exists(tmp / "prep2" / "atlas.nii"));
    CHECK(!fs::exists(tmp / "prep2" / "affine.txt"));
  }

  SUBCASE("lambda outside the trained range warns about extrapolation") {
    const fs::path log = tmp / "warn.log";
    REQUIRE(run_cli("preprocess --in '" + x0.string() + "' --checkpoint '" + ckpt.string() +
                        "' --out '" + (tmp / "prep3").string() + "' --lambda 100",
                    log) == 0);
    CHECK(test::read_text(log).find("extrapolating") != std::string::npos);
  }

  SUBCASE("evaluate writes a report covering every requested lambda") {
    REQUIRE(run_cli("evaluate --checkpoint '" + ckpt.string() + "' --manifest '" +
                    (tmp / "data" / "manifest.txt").string() + "' --lambdas 0.1,1 --out '" +
                    (tmp / "eval").string() + "'") == 0);
    const std::string report = test::read_text(tmp / "eval" / "report.txt");
    CHECK(report.rfind("npp-eval 1\n", 0) == 0);
    CHECK(report.find("aggregate 0.1 ") != std::string::npos);
    CHECK(report.find("aggregate 1 ") != std::string::npos);
    CHECK(report.find("record") != std::string::npos);
  }

  SUBCASE("a corrupt checkpoint is a data error") {
    std::vector<unsigned char> bytes = test::read_bytes(ckpt);
    bytes[bytes.size() / 2] ^= 0x5a;
    test::write_bytes(tmp / "bad.ckpt", bytes);
    CHECK(run_cli("preprocess --in '" + x0.string() + "' --checkpoint '" +
                  (tmp / "bad.ckpt").string() + "' --out '" + (tmp / "prep4").string() + "'") ==
          2);
  }

  SUBCASE("a missing input volume is a data error") {
    CHECK(run_cli("preprocess --in '" + (tmp / "nope.nii").string() + "' --checkpoint '" +
                  ckpt.string() + "' --out '" + (tmp / "prep5").string() + "'") == 2);
  }
}

TEST_CASE("train rejects malformed configs with the data exit code") {
  test::ScratchDir tmp("cli_badcfg");
  write_text(tmp / "comma.cfg",
             "[model]\nhyper_hidden = 8,16\n[data]\nmanifest = m.txt\n");
  CHECK(run_cli("train --config '" + (tmp / "comma.cfg").string() + "' --out '" +
                (tmp / "o1").string() + "'") == 2);

  write_text(tmp / "unknown.cfg",
             "[model]\nlevels = 2\n[train]\nwarp_speed = 9\n[data]\nmanifest = m.txt\n");
  CHECK(run_cli("train --config '" + (tmp / "unknown.cfg").string() + "' --out '" +
                (tmp / "o2").string() + "'") == 2);

  CHECK(run_cli("train --config '" + (tmp / "absent.cfg").string() + "' --out '" +
                (tmp / "o3").string() + "'") == 2);
}

TEST_CASE("gradcheck exits zero and reports every suite as passing") {
  test::ScratchDir tmp("cli_gradcheck");
  REQUIRE(run_cli("gradcheck --out '" + tmp.path().string() + "'") == 0);
  const std::string report = test::read_text(tmp / "gradcheck.txt");
  CHECK(!report.empty());
  CHECK(report.find("FAIL") == std::string::npos);
  CHECK(report.find("ok") != std::string::npos);
}

}  // TEST_SUITE
