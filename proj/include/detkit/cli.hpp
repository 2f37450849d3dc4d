#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "detkit/augment.hpp"
#include "detkit/ensembling.hpp"
#include "detkit/error.hpp"
#include "detkit/evaluation.hpp"
#include "detkit/exec_oracle.hpp"
#include "detkit/io.hpp"
#include "detkit/labelspace.hpp"
#include "detkit/loss.hpp"
#include "detkit/rng.hpp"
#include "detkit/sampling.hpp"
#include "detkit/scaling.hpp"

namespace detkit::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitInfeasible = 4;

struct GlobalOptions {
  std::uint64_t seed = 0;
  unsigned jobs = 1;
  std::string hierarchy;
  bool oi_order = false;

  io::CoordOrder order() const { return oi_order ? io::CoordOrder::open_images : io::CoordOrder::xy; }
};

namespace detail {

inline nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw data_error(path.string() + ": " + e.what());
  }
}

inline LabelHierarchy hierarchy_or_flat(const GlobalOptions& g, const std::vector<LabelId>& labels) {
  if (!g.hierarchy.empty()) return load_hierarchy(read_json(g.hierarchy));
  return LabelHierarchy::flat(labels);
}

template <typename Rows>
std::vector<LabelId> labels_of(const Rows& rows) {
  std::vector<LabelId> out;
  for (const auto& r : rows) out.push_back(r.label);
  return out;
}

inline std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  io::CsvReader dummy("", "--grid");
  while (std::getline(ss, item, ',')) out.push_back(dummy.number(item, "grid"));
  return out;
}

inline std::vector<double> json_axis(const nlohmann::json& axes, const char* name) {
  if (!axes.contains(name) || !axes[name].is_array()) throw data_error(std::string("grid spec needs axes.") + name);
  return axes[name].get<std::vector<double>>();
}

}  // namespace detail

struct EvaluateArgs {
  std::string detections, groundtruth, out;
  double iou = 0.5;
};

inline int cmd_evaluate(const GlobalOptions& g, const EvaluateArgs& a, std::ostream& out) {
  const auto dets = io::read_detections(a.detections, g.order());
  const auto gts = io::read_ground_truth(a.groundtruth, g.order());
  auto labels = detail::labels_of(dets);
  for (const auto& l : detail::labels_of(gts)) labels.push_back(l);
  const auto h = detail::hierarchy_or_flat(g, labels);
  const auto report = hierarchical_map(dets, gts, h, a.iou);
  if (!a.out.empty()) io::write_ap_report(report, a.out);
  out << "labels evaluated: " << report.ap.size() << '\n';
  out << "labels without ground truth: " << report.without_ground_truth.size() << '\n';
  out << "mAP: " << io::fixed6(report.mean_ap) << '\n';
  return kExitOk;
}

struct EnsembleArgs {
  std::string manifest, out, classifier;
  bool drop_unscored = false;
};

inline int cmd_ensemble(const GlobalOptions& g, const EnsembleArgs& a, std::ostream& out) {
  const auto doc = detail::read_json(a.manifest);
  const fs::path base = fs::path(a.manifest).parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
  if (!doc.contains("models") || !doc["models"].is_array() || doc["models"].empty())
    throw data_error("manifest needs a non-empty \"models\" array");
  const double alpha = doc.value("alpha", 0.1);
  const double d = doc.value("default_threshold", 0.5);

  std::optional<std::map<ClassifierKey, double>> classifier;
  if (!a.classifier.empty()) classifier = io::read_classifier_scores(a.classifier);
  const auto missing = a.drop_unscored ? MissingClassifierScore::drop : MissingClassifierScore::passthrough;

  std::vector<ModelRun> runs;
  std::map<std::string, std::set<LabelId>> subsets;
  std::set<std::string> ids;
  for (const auto& m : doc["models"]) {
    if (!m.contains("id") || !m.contains("detections_csv") || !m.contains("ap_csv"))
      throw data_error("each model needs \"id\", \"detections_csv\" and \"ap_csv\"");
    ModelRun run{m["id"].get<std::string>(), io::read_detections(resolve(m["detections_csv"]), g.order()),
                 io::read_ap_table(resolve(m["ap_csv"]))};
    if (!ids.insert(run.model_id).second) throw data_error("duplicate model id " + run.model_id);
    if (classifier) run.detections = classifier_reweight(run.detections, *classifier, missing);
    if (m.contains("expert_subset")) {
      auto labels = m["expert_subset"].get<std::vector<std::string>>();
      subsets[run.model_id] = {labels.begin(), labels.end()};
    }
    runs.push_back(std::move(run));
  }
  for (auto& run : runs) {
    if (subsets.count(run.model_id)) {
      const ModelRun single[] = {run};
      run.detections = expert_consensus(single, subsets);
    }
  }

  const auto wt = weight_table(runs, alpha);
  ThresholdTable tt(d);
  for (const auto& run : runs) {
    for (const auto& det : run.detections) tt.set(det.label, d);
  }
  if (doc.contains("thresholds_csv")) {
    const auto overrides = io::read_thresholds(resolve(doc["thresholds_csv"]), d);
    for (const auto& [label, h] : overrides.entries()) tt.set(label, h);
  }
  const auto fused = fuse(runs, wt, tt);
  io::write_detections(fused, a.out);
  out << "models: " << runs.size() << '\n';
  out << "fused detections: " << fused.size() << '\n';
  return kExitOk;
}

struct NmsSearchArgs {
  std::string detections, groundtruth, out, grid = "0.3,0.35,0.4,0.45,0.5,0.55,0.6,0.65,0.7", mode = "penalty";
  double default_threshold = 0.5, lambda = 1.0, iou = 0.5;
};

inline int cmd_nms_search(const GlobalOptions& g, const NmsSearchArgs& a, std::ostream& out) {
  const auto dets = io::read_detections(a.detections, g.order());
  const auto gts = io::read_ground_truth(a.groundtruth, g.order());
  auto labels = detail::labels_of(dets);
  for (const auto& l : detail::labels_of(gts)) labels.push_back(l);
  const auto h = detail::hierarchy_or_flat(g, labels);
  ThresholdSearchOptions opt;
  opt.default_threshold = a.default_threshold;
  opt.grid = detail::parse_list(a.grid);
  opt.mode = a.mode == "paper" ? ThresholdObjective::paper : ThresholdObjective::penalty;
  opt.lambda = a.lambda;
  opt.iou_thr = a.iou;
  opt.jobs = g.jobs;
  const auto table = search_nms_thresholds(dets, gts, h, opt);
  io::write_thresholds(table, a.out);
  out << "categories: " << table.entries().size() << '\n';
  return kExitOk;
}

struct SampleArgs {
  std::string groundtruth, out, histogram;
  std::size_t n = 1000;
};

inline int cmd_sample(const GlobalOptions& g, const SampleArgs& a, std::ostream& out) {
  const auto index = build_index(io::read_ground_truth(a.groundtruth, g.order()));
  const auto stream = sample_epoch(index, a.n, g.seed);
  io::atomic_write(a.out, [&](std::ostream& o) {
    o << "Category,ImageID\n";
    for (const auto& d : stream.draws) o << d.category << ',' << d.image_id << '\n';
  });
  const auto hist = exposure_histogram(stream, index);
  if (!a.histogram.empty()) {
    io::atomic_write(a.histogram, [&](std::ostream& o) {
      o << "Category,Count\n";
      for (const auto& [c, n] : hist) o << c << ',' << n << '\n';
    });
  }
  out << "categories: " << index.num_categories() << '\n';
  out << "draws: " << stream.draws.size() << '\n';
  return kExitOk;
}

struct ScaleSearchArgs {
  std::string grid, oracle = "builtin:separable-concave", out, plan_out, base_plan;
  std::optional<double> phi;
  bool fix_resolution = false;
  int stage4_extra = 0;
};

inline int cmd_scale_search(const GlobalOptions&, const ScaleSearchArgs& a, std::ostream& out) {
  ScaleGrid grid = default_scale_grid();
  if (!a.grid.empty()) {
    const auto spec = detail::read_json(a.grid);
    if (!spec.contains("axes") || !spec["axes"].is_object()) throw data_error("grid spec needs an \"axes\" object");
    grid.depths = detail::json_axis(spec["axes"], "depth");
    grid.widths = detail::json_axis(spec["axes"], "width");
    grid.resolutions = detail::json_axis(spec["axes"], "resolution");
    grid.target = spec.value("target", 2.0);
    grid.tol = spec.value("tol", 0.05);
  }

  ScaleSearchResult result;
  if (a.oracle.rfind("builtin:", 0) == 0) {
    const auto& b = oracles::find_builtin(a.oracle.substr(8));
    result = grid_search_base_scan(b.fn, grid);
  } else if (a.oracle.rfind("exec:", 0) == 0) {
    ExecOracle oracle(a.oracle.substr(5));
    result = grid_search_base_scan(oracle, grid);
  } else {
    throw usage_error("--oracle must be builtin:<name> or exec:<command>");
  }

  if (!a.out.empty()) {
    io::atomic_write(a.out, [&](std::ostream& o) {
      o << "Depth,Width,Resolution,Constraint,Feasible,Score\n";
      for (const auto& r : result.scan) {
        o << io::fixed6(r.triple.depth) << ',' << io::fixed6(r.triple.width) << ',' << io::fixed6(r.triple.resolution)
          << ',' << io::fixed6(r.constraint) << ',' << (r.score ? 1 : 0) << ','
          << (r.score ? io::fixed6(*r.score) : std::string()) << '\n';
      }
    });
  }
  const auto& b = result.best;
  out << "best: " << io::fixed6(b.depth) << ' ' << io::fixed6(b.width) << ' ' << io::fixed6(b.resolution)
      << " constraint " << io::fixed6(constraint_value(b)) << " score " << io::fixed6(result.best_score) << '\n';

  ScaleTriple scaled = b;
  if (a.phi) {
    scaled = compound_scale(b, *a.phi);
    out << "scaled: " << io::fixed6(scaled.depth) << ' ' << io::fixed6(scaled.width) << ' '
        << io::fixed6(scaled.resolution) << '\n';
  }
  if (!a.plan_out.empty()) {
    const ArchPlan base = a.base_plan.empty() ? efficientnet_b0_plan() : plan_from_json(detail::read_json(a.base_plan));
    const auto plan = plan_variant(base, scaled, a.fix_resolution, a.stage4_extra);
    io::atomic_write(a.plan_out, [&](std::ostream& o) { o << plan_to_json(plan).dump(2) << '\n'; });
  }
  return kExitOk;
}

struct AugmentArgs {
  std::string image, boxes, policy, out_image, out_boxes, image_id;
};

inline int cmd_augment(const GlobalOptions& g, const AugmentArgs& a, std::ostream& out) {
  RasterImage img;
  {
    std::ifstream in(a.image, std::ios::binary);
    if (!in) throw data_error("cannot open " + a.image);
    img = read_ppm(in);
  }
  const auto boxes = io::read_boxes(a.boxes);
  const Policy policy = a.policy.empty() ? default_policy() : policy_from_json(detail::read_json(a.policy));
  const std::string id = a.image_id.empty() ? fs::path(a.image).stem().string() : a.image_id;
  Rng rng(derive_seed(g.seed, id));
  const auto r = apply_policy(img, boxes, policy, rng);
  io::atomic_write(a.out_image, [&](std::ostream& o) { write_ppm(o, r.image); });
  io::write_boxes(r.boxes, a.out_boxes);
  out << "boxes: " << boxes.size() << " -> " << r.boxes.size() << '\n';
  return kExitOk;
}

struct LossCheckArgs {
  std::string input, out;
  double epsilon = 1e-5;
};

// Input rows: Logits,Target with space-separated vectors of equal length.
inline int cmd_loss_check(const GlobalOptions&, const LossCheckArgs& a, std::ostream& out) {
  auto r = io::CsvReader::from_file(a.input);
  r.expect_header({"Logits", "Target"});
  auto vec = [&](const std::string& field, const char* col) {
    std::vector<double> v;
    std::stringstream ss(field);
    std::string tok;
    while (ss >> tok) v.push_back(r.number(tok, col));
    return v;
  };
  std::ostringstream report;
  report << "Row,K,Loss,StandardLoss,MaxFDError,Gradient\n";
  std::vector<std::string> f;
  double worst = 0.0;
  std::size_t row = 0;
  while (r.next(f)) {
    if (f.size() != 2) throw r.error("expected 2 columns");
    ++row;
    const auto x = vec(f[0], "Logits");
    const auto ty = vec(f[1], "Target");
    LabelDistribution y = LabelDistribution::from_dense(ty);
    if (x.size() != y.size()) throw r.error("logit and target lengths differ");
    const double loss = distributed_softmax_ce(x, y);
    const auto grad = distributed_softmax_grad(x, y);
    const double fd = finite_diff_check(x, y, a.epsilon);
    worst = std::max(worst, fd);
    report << row << ',' << y.k() << ',' << io::fixed6(loss) << ','
           << (y.k() == 1 ? io::fixed6(standard_softmax_ce(x, y.active()[0])) : std::string()) << ',';
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", fd);
    report << buf << ',';
    for (std::size_t i = 0; i < grad.size(); ++i) report << (i ? " " : "") << io::fixed6(grad[i]);
    report << '\n';
  }
  if (a.out.empty()) {
    out << report.str();
  } else {
    io::atomic_write(a.out, [&](std::ostream& o) { o << report.str(); });
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", worst);
  out << "rows: " << row << '\n' << "max finite-difference discrepancy: " << buf << '\n';
  return kExitOk;
}

struct ExpandArgs {
  std::string input, out, mode = "ancestors";
};

inline int cmd_expand(const GlobalOptions& g, const ExpandArgs& a, std::ostream& out) {
  if (g.hierarchy.empty()) throw usage_error("expand needs --hierarchy");
  const auto h = load_hierarchy(detail::read_json(g.hierarchy));
  auto reader = io::CsvReader::from_file(a.input);
  const auto header = reader.header();
  auto again = io::CsvReader::from_file(a.input);
  const bool is_detections = std::find(header.begin(), header.end(), "Score") != header.end();
  if (is_detections) {
    const auto mode = a.mode == "ambiguity" ? ExpansionMode::ancestors_and_ambiguity : ExpansionMode::ancestors;
    const auto dets = io::parse_detections(again, g.order());
    const auto x = expand_detections(h, dets, mode);
    io::write_detections(x, a.out);
    out << "detections: " << dets.size() << " -> " << x.size() << '\n';
  } else {
    if (a.mode != "ancestors") throw usage_error("ground truth only supports --mode ancestors");
    const auto gts = io::parse_ground_truth(again, g.order());
    const auto x = expand_ground_truth(h, gts);
    io::write_ground_truth(x, a.out);
    out << "ground truth: " << gts.size() << " -> " << x.size() << '\n';
  }
  return kExitOk;
}

// Entry point shared by the executable and the tests. args excludes argv[0].
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Detection evaluation, ensembling, sampling and augmentation toolkit", "detkit"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  app.add_option("--seed", g.seed, "Seed for every random draw");
  app.add_option("--jobs", g.jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--hierarchy", g.hierarchy, "Label hierarchy JSON");
  app.add_flag("--oi-order", g.oi_order, "Input CSVs use XMin,XMax,YMin,YMax column order");

  std::function<int()> action;

  EvaluateArgs ev;
  auto* s_eval = app.add_subcommand("evaluate", "Hierarchical mAP of detections against ground truth");
  s_eval->add_option("--detections", ev.detections)->required();
  s_eval->add_option("--groundtruth", ev.groundtruth)->required();
  s_eval->add_option("--iou", ev.iou);
  s_eval->add_option("--out", ev.out, "Per-label AP CSV");
  s_eval->callback([&] { action = [&] { return cmd_evaluate(g, ev, out); }; });

  EnsembleArgs en;
  auto* s_ens = app.add_subcommand("ensemble", "Per-category weighted fusion of model runs");
  s_ens->add_option("--manifest", en.manifest)->required();
  s_ens->add_option("--out", en.out)->required();
  s_ens->add_option("--classifier", en.classifier, "Classifier score CSV");
  s_ens->add_flag("--drop-unscored", en.drop_unscored, "Drop detections without a classifier score");
  s_ens->callback([&] { action = [&] { return cmd_ensemble(g, en, out); }; });

  NmsSearchArgs ns;
  auto* s_nms = app.add_subcommand("nms-search", "Per-category NMS threshold search");
  s_nms->add_option("--detections", ns.detections)->required();
  s_nms->add_option("--groundtruth", ns.groundtruth)->required();
  s_nms->add_option("--out", ns.out)->required();
  s_nms->add_option("--default", ns.default_threshold);
  s_nms->add_option("--grid", ns.grid, "Comma-separated thresholds");
  s_nms->add_option("--mode", ns.mode)->check(CLI::IsMember({"penalty", "paper"}));
  s_nms->add_option("--lambda", ns.lambda);
  s_nms->add_option("--iou", ns.iou);
  s_nms->callback([&] { action = [&] { return cmd_nms_search(g, ns, out); }; });

  SampleArgs sa;
  auto* s_sample = app.add_subcommand("sample", "Class-aware two-stage image sampling");
  s_sample->add_option("--groundtruth", sa.groundtruth)->required();
  s_sample->add_option("-n,--draws", sa.n);
  s_sample->add_option("--out", sa.out)->required();
  s_sample->add_option("--histogram", sa.histogram);
  s_sample->callback([&] { action = [&] { return cmd_sample(g, sa, out); }; });

  ScaleSearchArgs ss;
  auto* s_scale = app.add_subcommand("scale-search", "Constrained depth/width/resolution grid search");
  s_scale->add_option("--grid", ss.grid, "Grid spec JSON");
  s_scale->add_option("--oracle", ss.oracle, "builtin:<name> or exec:<command>");
  s_scale->add_option("--out", ss.out, "Full scan CSV");
  s_scale->add_option("--phi", ss.phi, "Compound scaling exponent");
  s_scale->add_option("--plan-out", ss.plan_out, "Write the scaled stage plan JSON");
  s_scale->add_option("--base-plan", ss.base_plan, "Base stage plan JSON");
  s_scale->add_flag("--fix-resolution", ss.fix_resolution);
  s_scale->add_option("--stage4-extra", ss.stage4_extra);
  s_scale->callback([&] { action = [&] { return cmd_scale_search(g, ss, out); }; });

  AugmentArgs au;
  auto* s_aug = app.add_subcommand("augment", "Apply an augmentation policy to an image and its boxes");
  s_aug->add_option("--image", au.image)->required();
  s_aug->add_option("--boxes", au.boxes)->required();
  s_aug->add_option("--policy", au.policy, "Policy JSON (default: built-in detection policy)");
  s_aug->add_option("--out-image", au.out_image)->required();
  s_aug->add_option("--out-boxes", au.out_boxes)->required();
  s_aug->add_option("--image-id", au.image_id, "Seed key (default: image file stem)");
  s_aug->callback([&] { action = [&] { return cmd_augment(g, au, out); }; });

  LossCheckArgs lc;
  auto* s_loss = app.add_subcommand("loss-check", "Distributed softmax loss, gradients and finite-difference check");
  s_loss->add_option("--input", lc.input)->required();
  s_loss->add_option("--out", lc.out);
  s_loss->add_option("--epsilon", lc.epsilon);
  s_loss->callback([&] { action = [&] { return cmd_loss_check(g, lc, out); }; });

  ExpandArgs ex;
  auto* s_exp = app.add_subcommand("expand", "Expand labels to ancestors (and ambiguity partners)");
  s_exp->add_option("--input", ex.input)->required();
  s_exp->add_option("--out", ex.out)->required();
  s_exp->add_option("--mode", ex.mode)->check(CLI::IsMember({"ancestors", "ambiguity"}));
  s_exp->callback([&] { action = [&] { return cmd_expand(g, ex, out); }; });

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n' << app.help();
    return kExitUsage;
  }

  try {
    return action ? action() : kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    switch (e.kind()) {
      case ErrorKind::usage:
        return kExitUsage;
      case ErrorKind::infeasible:
        return kExitInfeasible;
      case ErrorKind::data:
        return kExitData;
    }
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
}

}  // namespace detkit::cli
