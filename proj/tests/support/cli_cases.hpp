#pragma once

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "detkit/cli.hpp"
#include "detkit/io.hpp"

namespace detkit::testing {

namespace fs = std::filesystem;

struct CliCase {
  std::string name;
  std::vector<std::string> args;     // {out} is replaced by the output directory
  std::vector<std::string> outputs;  // files written under {out}
};

inline std::string toy(const std::string& rel) { return std::string(DETKIT_DATA_DIR) + "/toy/" + rel; }

// One invocation per subcommand over the bundled toy data.
inline std::vector<CliCase> toy_cli_cases() {
  const std::string hier = toy("hierarchy.json");
  return {
      {"evaluate",
       {"--hierarchy", hier, "evaluate", "--detections", toy("detections.csv"), "--groundtruth",
        toy("groundtruth.csv"), "--out", "{out}/ap.csv"},
       {"ap.csv"}},
      {"ensemble",
       {"ensemble", "--manifest", toy("ensemble/manifest.json"), "--classifier", toy("ensemble/classifier.csv"),
        "--out", "{out}/fused.csv"},
       {"fused.csv"}},
      {"nms-search",
       {"--hierarchy", hier, "--jobs", "2", "nms-search", "--detections", toy("detections.csv"), "--groundtruth",
        toy("groundtruth.csv"), "--out", "{out}/thresholds.csv"},
       {"thresholds.csv"}},
      {"sample",
       {"--seed", "17", "sample", "--groundtruth", toy("groundtruth.csv"), "-n", "2000", "--out", "{out}/draws.csv",
        "--histogram", "{out}/hist.csv"},
       {"draws.csv", "hist.csv"}},
      {"scale-search",
       {"scale-search", "--grid", toy("scale_grid.json"), "--oracle", "builtin:separable-concave", "--out",
        "{out}/scan.csv", "--phi", "2", "--fix-resolution", "--stage4-extra", "2", "--plan-out", "{out}/plan.json"},
       {"scan.csv", "plan.json"}},
      {"augment",
       {"--seed", "5", "augment", "--image", toy("image.ppm"), "--boxes", toy("boxes.csv"), "--policy",
        toy("policy.json"), "--out-image", "{out}/aug.ppm", "--out-boxes", "{out}/aug_boxes.csv"},
       {"aug.ppm", "aug_boxes.csv"}},
      {"loss-check", {"loss-check", "--input", toy("loss.csv"), "--out", "{out}/loss_report.csv"}, {"loss_report.csv"}},
      {"expand",
       {"--hierarchy", hier, "expand", "--input", toy("detections.csv"), "--mode", "ambiguity", "--out",
        "{out}/expanded.csv"},
       {"expanded.csv"}},
  };
}

struct CliRun {
  int code = -1;
  std::string out, err;
  std::vector<std::string> files;  // contents of CliCase::outputs
};

inline CliRun run_case(const CliCase& c, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<std::string> args;
  for (auto a : c.args) {
    if (auto p = a.find("{out}"); p != std::string::npos) a.replace(p, 5, dir.string());
    args.push_back(a);
  }
  std::ostringstream out, err;
  CliRun r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  for (const auto& f : c.outputs) r.files.push_back(fs::exists(dir / f) ? io::read_text(dir / f) : std::string());
  return r;
}

inline fs::path scratch_dir(const std::string& tag) {
  static int counter = 0;
  return fs::temp_directory_path() / ("detkit_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
}

}  // namespace detkit::testing
