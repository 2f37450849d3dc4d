#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "detkit/ensembling.hpp"
#include "detkit/evaluation.hpp"
#include "detkit/io.hpp"
#include "detkit/rng.hpp"

using namespace detkit;

namespace {

const std::string kToy = std::string(DETKIT_DATA_DIR) + "/toy";

std::vector<double> grid_03_07() { return {0.3, 0.4, 0.5, 0.6, 0.7}; }

// Plain argmax of ap - lambda (h-d)^2, first index wins exact ties.
std::size_t scan_argmax(const std::vector<double>& grid, const std::vector<double>& ap, double d, double lambda) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const double vi = ap[i] - lambda * (grid[i] - d) * (grid[i] - d);
    const double vb = ap[best] - lambda * (grid[best] - d) * (grid[best] - d);
    if (vi > vb) best = i;
  }
  return best;
}

}  // namespace

TEST(CategoryWeight, BoundaryAndHandValues) {
  EXPECT_EQ(category_weight(0.6, 0.4, 0.6, 0.2), 1.0);
  EXPECT_EQ(category_weight(0.4, 0.4, 0.6, 0.2), 0.2);
  EXPECT_NEAR(category_weight(0.5, 0.4, 0.6, 0.2), 0.6, 1e-15);
  EXPECT_EQ(category_weight(0.1, 0.4, 0.6, 0.2), 0.2);
  EXPECT_EQ(category_weight(0.4, 0.4, 0.4, 0.2), 1.0);
  EXPECT_THROW(category_weight(0.5, 0.4, 0.6, 1.5), Error);
}

TEST(CategoryWeightProperty, MonotoneAndArgmaxPreserving) {
  Rng rng(31);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t m = 2 + rng.uniform_index(6);
    const double alpha = rng.uniform01();
    std::vector<ModelRun> runs(m);
    for (std::size_t i = 0; i < m; ++i) {
      runs[i].model_id = "m" + std::to_string(i);
      runs[i].per_category_ap["c"] = rng.uniform01();
    }
    const auto wt = weight_table(runs, alpha);
    std::size_t arg_s = 0, arg_w = 0;
    for (std::size_t i = 1; i < m; ++i) {
      if (runs[i].per_category_ap["c"] > runs[arg_s].per_category_ap["c"]) arg_s = i;
      if (wt.at(runs[i].model_id, "c") > wt.at(runs[arg_w].model_id, "c")) arg_w = i;
    }
    EXPECT_EQ(arg_s, arg_w);
    EXPECT_EQ(wt.at(runs[arg_s].model_id, "c"), 1.0);

    const double mu = rng.uniform01(), t = mu + (1 - mu) * rng.uniform01();
    double prev = -1;
    for (int k = 0; k <= 20; ++k) {
      const double s = mu + (t - mu) * k / 20.0;
      const double w = category_weight(s, mu, t, alpha);
      EXPECT_GE(w, prev - 1e-15);
      EXPECT_GE(w, alpha - 1e-15);
      EXPECT_LE(w, 1.0 + 1e-15);
      prev = w;
    }
  }
}

TEST(WeightTableTest, HandCases) {
  std::vector<ModelRun> runs{{"a", {}, {{"c", 0.3}}}};
  EXPECT_EQ(weight_table(runs, 0.1).at("a", "c"), 1.0);
  runs = {{"a", {}, {{"c", 0.2}}}, {"b", {}, {{"c", 0.8}}}};
  auto wt = weight_table(runs, 0.1);
  EXPECT_EQ(wt.at("b", "c"), 1.0);
  EXPECT_EQ(wt.at("a", "c"), 0.1);
  runs = {{"a", {}, {{"c", 0.5}}}, {"b", {}, {{"c", 0.5}}}};
  EXPECT_EQ(weight_table(runs, 0.1).at("a", "c"), 1.0);
  EXPECT_THROW(weight_table({}, 0.1), Error);
  runs = {{"a", {}, {{"c", 0.5}}}, {"b", {}, {{"d", 0.5}}}};
  EXPECT_THROW(weight_table(runs, 0.1), Error);
}

TEST(Reweight, ScalesScores) {
  const BBox b{0, 0, 0.5, 0.5};
  ModelRun run{"a", {{"i", "c", 0.8, b}}, {}};
  WeightTable wt(0.0);
  wt.set("a", "c", 0.6);
  EXPECT_NEAR(reweight_detections(run, wt)[0].score, 0.48, 1e-15);
  wt.set("a", "c", 1.0);
  EXPECT_EQ(reweight_detections(run, wt)[0].score, 0.8);
  wt.set("a", "c", 0.0);
  EXPECT_EQ(reweight_detections(run, wt)[0].score, 0.0);
  run.detections[0].label = "z";
  EXPECT_THROW(reweight_detections(run, wt), Error);
}

TEST(ClassifierReweight, MultipliesOrPasses) {
  const BBox b{0.1, 0.2, 0.3, 0.4};
  const std::vector<Detection> d{{"i", "c", 0.9, b}, {"i", "c", 0.7, {0.5, 0.5, 0.6, 0.6}}};
  std::map<ClassifierKey, double> cs{{classifier_key("i", "c", {0.1000000001, 0.2, 0.3, 0.4}), 0.5}};
  auto out = classifier_reweight(d, cs);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_NEAR(out[0].score, 0.45, 1e-15);
  EXPECT_EQ(out[1].score, 0.7);
  out = classifier_reweight(d, cs, MissingClassifierScore::drop);
  EXPECT_EQ(out.size(), 1u);
  cs.begin()->second = 1.0;
  EXPECT_EQ(classifier_reweight(d, cs)[0].score, 0.9);
  cs.begin()->second = 1.2;
  EXPECT_THROW(classifier_reweight(d, cs), Error);
}

TEST(ExpertConsensus, OverlapRule) {
  const BBox b{0, 0, 0.5, 0.5};
  std::vector<ModelRun> runs{{"e1", {{"i", "A", 0.9, b}, {"i", "B", 0.8, b}}, {}},
                             {"e2", {{"i", "B", 0.7, b}, {"i", "C", 0.6, b}}, {}}};
  std::map<std::string, std::set<LabelId>> subsets{{"e1", {"A", "B"}}, {"e2", {"B", "C"}}};
  auto out = expert_consensus(runs, subsets);
  ASSERT_EQ(out.size(), 2u);
  for (const auto& d : out) EXPECT_EQ(d.label, "B");

  EXPECT_TRUE(expert_consensus(std::span(runs).first(1), {{"e1", {"A", "B"}}}).empty());
  subsets["e2"] = {"A", "B", "C"};
  subsets["e1"] = {"A", "B", "C"};
  EXPECT_EQ(expert_consensus(runs, subsets).size(), 4u);
  subsets["e1"] = {"B"};
  EXPECT_THROW(expert_consensus(runs, subsets), Error);
}

TEST(Fuse, Reductions) {
  const BBox b{0.1, 0.1, 0.4, 0.4}, c{0.12, 0.1, 0.42, 0.4}, far{0.6, 0.6, 0.9, 0.9};
  ModelRun a{"a", {{"i", "X", 0.9, b}, {"i", "X", 0.6, c}, {"i", "X", 0.5, far}}, {{"X", 0.5}, {"Y", 0.5}}};
  ThresholdTable tt(0.5);
  tt.set("X", 0.5);
  tt.set("Y", 0.5);
  std::vector<ModelRun> one{a};
  EXPECT_EQ(fuse(one, weight_table(one, 1.0), tt), per_class_nms(a.detections, tt));

  ModelRun bm{"b", {{"i", "X", 0.7, b}}, {{"X", 0.5}, {"Y", 0.5}}};
  std::vector<ModelRun> two{a, bm};
  auto out = fuse(two, weight_table(two, 1.0), tt);
  EXPECT_EQ(std::count_if(out.begin(), out.end(), [&](const Detection& d) { return d.box == b; }), 1);
  EXPECT_EQ(out[0].score, 0.9);

  bm.detections = {{"i", "Y", 0.7, b}};
  two = {a, bm};
  out = fuse(two, weight_table(two, 1.0), tt);
  EXPECT_EQ(out.size(), 3u);  // a's two survivors plus b's Y box
  tt = ThresholdTable(0.5);
  EXPECT_THROW(fuse(two, weight_table(two, 1.0), tt), Error);
}

TEST(SelectThreshold, HandCases) {
  const auto grid = grid_03_07();
  const std::vector<double> flat(5, 0.4);
  EXPECT_EQ(select_threshold(grid, flat, 0.5, ThresholdObjective::penalty, 1.0), 0.5);
  EXPECT_EQ(select_threshold(grid, std::vector<double>{0.1, 0.2, 0.3, 0.5, 0.2}, 0.5,
                             ThresholdObjective::penalty, 0.0),
            0.6);
  const std::vector<double> paper_grid{0.3, 0.4, 0.6, 0.7};
  EXPECT_EQ(select_threshold(paper_grid, std::vector<double>(4, 0.4), 0.5, ThresholdObjective::paper, 0), 0.4);
  EXPECT_THROW(select_threshold(grid, flat, 0.5, ThresholdObjective::paper, 0), Error);
  EXPECT_THROW(select_threshold({}, {}, 0.5, ThresholdObjective::penalty, 1), Error);
  EXPECT_THROW(select_threshold(grid, flat, 0.5, ThresholdObjective::penalty, -1), Error);
}

TEST(SelectThresholdProperty, MatchesExhaustiveScan) {
  Rng rng(8);
  const auto grid = grid_03_07();
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> ap(grid.size());
    for (auto& v : ap) v = rng.uniform01();
    const double lambda = trial % 2 ? 0.0 : 1.0;
    EXPECT_EQ(select_threshold(grid, ap, 0.5, ThresholdObjective::penalty, lambda),
              grid[scan_argmax(grid, ap, 0.5, lambda)]);
  }
}

// Every category's threshold from the search must equal the argmax of APs
// obtained by running per-class NMS at one global threshold and evaluating
// the whole dataset hierarchically.
TEST(NmsSearch, ToyMatchesGlobalEvaluationScan) {
  const auto h = load_hierarchy_text(io::read_text(kToy + "/hierarchy.json"));
  const auto gts = io::read_ground_truth(kToy + "/groundtruth.csv");
  const auto dets = io::read_detections(kToy + "/detections.csv");
  ThresholdSearchOptions opt;
  opt.grid = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  opt.lambda = 0.0;
  opt.jobs = 3;
  const auto res = search_nms_threshold_profiles(dets, gts, h, opt);
  const auto xd = expand_detections(h, dets, ExpansionMode::ancestors);
  for (std::size_t gi = 0; gi < opt.grid.size(); ++gi) {
    ThresholdTable tt(opt.grid[gi]);
    for (const auto& l : h.labels()) tt.set(l, opt.grid[gi]);
    const auto kept = per_class_nms(xd, tt);
    const auto rep = evaluate_flat(kept, expand_ground_truth(h, gts));
    for (const auto& [label, ap] : rep.ap) EXPECT_NEAR(res.ap_profiles.at(label)[gi], ap, 1e-15) << label;
  }
  for (const auto& [label, prof] : res.ap_profiles) {
    const double best = *std::max_element(prof.begin(), prof.end());
    double want = -1;
    for (std::size_t i = 0; i < prof.size(); ++i)
      if (prof[i] == best && (want < 0 || std::abs(opt.grid[i] - 0.5) < std::abs(want - 0.5) - 1e-12)) want = opt.grid[i];
    EXPECT_EQ(res.table.at(label), want) << label;
  }
  opt.jobs = 1;
  EXPECT_EQ(search_nms_thresholds(dets, gts, h, opt).entries(), res.table.entries());
}
