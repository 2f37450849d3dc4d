#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "detkit/boxes.hpp"
#include "detkit/error.hpp"
#include "detkit/evaluation.hpp"
#include "detkit/labelspace.hpp"
#include "detkit/parallel.hpp"

namespace detkit {

struct ModelRun {
  std::string model_id;
  std::vector<Detection> detections;
  std::map<LabelId, double> per_category_ap;  // validation AP per category
};

// Per-(model, category) weight from validation AP:
//   w = (s - mu) / (t - mu) + alpha * (t - s) / (t - mu)
// where mu and t are the mean and max AP of the category over all models.
// Below the mean the weight is alpha; when every model ties it is 1.
inline double category_weight(double s, double mu, double t, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw usage_error("alpha must lie in [0,1], got " + std::to_string(alpha));
  if (mu > t) throw data_error("category_weight: mean AP exceeds max AP");
  if (t == mu) return 1.0;
  if (s < mu) return alpha;
  const double span = t - mu;
  return (s - mu) / span + alpha * ((t - s) / span);
}

class WeightTable {
 public:
  explicit WeightTable(double alpha = 0.0) : alpha_(alpha) {}

  void set(const std::string& model, const LabelId& label, double w) { weights_[{model, label}] = w; }

  double at(const std::string& model, const LabelId& label) const {
    auto it = weights_.find({model, label});
    if (it == weights_.end()) throw data_error("no ensemble weight for model " + model + ", label " + label);
    return it->second;
  }

  bool contains(const std::string& model, const LabelId& label) const { return weights_.count({model, label}) != 0; }
  double alpha() const { return alpha_; }
  const std::map<std::pair<std::string, LabelId>, double>& entries() const { return weights_; }

 private:
  double alpha_;
  std::map<std::pair<std::string, LabelId>, double> weights_;
};

inline WeightTable weight_table(std::span<const ModelRun> runs, double alpha) {
  if (runs.empty()) throw usage_error("weight_table: no model runs");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw usage_error("alpha must lie in [0,1], got " + std::to_string(alpha));
  std::set<LabelId> universe;
  for (const auto& r : runs) {
    for (const auto& [label, ap] : r.per_category_ap) {
      if (!(ap >= 0.0 && ap <= 1.0))
        throw data_error("AP out of [0,1] for model " + r.model_id + ", label " + label);
      universe.insert(label);
    }
  }
  WeightTable table(alpha);
  for (const auto& label : universe) {
    std::vector<double> s;
    for (const auto& r : runs) {
      auto it = r.per_category_ap.find(label);
      if (it == r.per_category_ap.end())
        throw data_error("model " + r.model_id + " has no validation AP for label " + label);
      s.push_back(it->second);
    }
    const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
    const double t = *hi;
    double mu = 0.0;
    for (double v : s) mu += v;
    mu /= static_cast<double>(s.size());
    // The mean can drift past the extremes by rounding.
    mu = std::clamp(mu, *lo, t);
    for (std::size_t m = 0; m < runs.size(); ++m) {
      const double w = (*lo == *hi) ? 1.0 : category_weight(s[m], mu, t, alpha);
      table.set(runs[m].model_id, label, w);
    }
  }
  return table;
}

inline std::vector<Detection> reweight_detections(const ModelRun& run, const WeightTable& wt) {
  std::vector<Detection> out = run.detections;
  for (auto& d : out) d.score = std::clamp(d.score * wt.at(run.model_id, d.label), 0.0, 1.0);
  return out;
}

// Join key for classifier scores: image, label and the box rounded to 6 decimals.
using ClassifierKey = std::tuple<std::string, LabelId, std::int64_t, std::int64_t, std::int64_t, std::int64_t>;

inline ClassifierKey classifier_key(const std::string& image_id, const LabelId& label, const BBox& b) {
  auto q = [](double v) { return static_cast<std::int64_t>(std::llround(v * 1e6)); };
  return {image_id, label, q(b.x_min), q(b.y_min), q(b.x_max), q(b.y_max)};
}

enum class MissingClassifierScore { passthrough, drop };

inline std::vector<Detection> classifier_reweight(std::span<const Detection> dets,
                                                  const std::map<ClassifierKey, double>& classifier_scores,
                                                  MissingClassifierScore missing = MissingClassifierScore::passthrough) {
  for (const auto& [key, s] : classifier_scores) {
    if (!(s >= 0.0 && s <= 1.0))
      throw data_error("classifier score out of [0,1] for image " + std::get<0>(key) + ", label " + std::get<1>(key));
  }
  std::vector<Detection> out;
  out.reserve(dets.size());
  for (const auto& d : dets) {
    auto it = classifier_scores.find(classifier_key(d.image_id, d.label, d.box));
    if (it == classifier_scores.end()) {
      if (missing == MissingClassifierScore::passthrough) out.push_back(d);
      continue;
    }
    Detection r = d;
    r.score = d.score * it->second;
    out.push_back(std::move(r));
  }
  return out;
}

// Keeps an expert detection only when its label is declared by at least two
// expert subsets.
inline std::vector<Detection> expert_consensus(std::span<const ModelRun> expert_runs,
                                               const std::map<std::string, std::set<LabelId>>& subsets) {
  std::map<LabelId, std::size_t> membership;
  for (const auto& [model, subset] : subsets) {
    for (const auto& l : subset) ++membership[l];
  }
  std::vector<Detection> out;
  for (const auto& run : expert_runs) {
    auto sub = subsets.find(run.model_id);
    if (sub == subsets.end()) throw data_error("no expert subset declared for model " + run.model_id);
    for (const auto& d : run.detections) {
      if (sub->second.count(d.label) == 0)
        throw data_error("model " + run.model_id + " emitted label " + d.label + " outside its expert subset");
      if (membership[d.label] >= 2) out.push_back(d);
    }
  }
  return out;
}

class ThresholdTable {
 public:
  explicit ThresholdTable(double default_threshold = 0.5) : default_(default_threshold) {
    if (!(default_threshold > 0.0 && default_threshold < 1.0))
      throw usage_error("default NMS threshold must lie in (0,1)");
  }

  void set(const LabelId& label, double h) {
    if (!(h > 0.0 && h < 1.0)) throw data_error("NMS threshold for " + label + " must lie in (0,1)");
    thresholds_[label] = h;
  }

  double at(const LabelId& label) const {
    auto it = thresholds_.find(label);
    if (it == thresholds_.end()) throw data_error("no NMS threshold for label " + label);
    return it->second;
  }

  bool contains(const LabelId& label) const { return thresholds_.count(label) != 0; }
  double default_threshold() const { return default_; }
  const std::map<LabelId, double>& entries() const { return thresholds_; }

 private:
  double default_;
  std::map<LabelId, double> thresholds_;
};

// Sort order for emitted detection sets: score descending, then image, label, box.
inline void sort_by_score(std::vector<Detection>& dets) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    if (a.label != b.label) return a.label < b.label;
    return a.box < b.box;
  });
}

// Per-(image, label) NMS with a per-label threshold.
inline std::vector<Detection> per_class_nms(std::span<const Detection> dets, const ThresholdTable& tt) {
  std::map<std::pair<std::string, LabelId>, std::vector<Detection>> groups;
  for (const auto& d : dets) groups[{d.image_id, d.label}].push_back(d);
  std::vector<Detection> out;
  for (const auto& [key, group] : groups) {
    auto kept = nms(group, tt.at(key.second));
    out.insert(out.end(), kept.begin(), kept.end());
  }
  sort_by_score(out);
  return out;
}

// Weights are applied before suppression.
inline std::vector<Detection> fuse(std::span<const ModelRun> runs, const WeightTable& wt, const ThresholdTable& tt) {
  std::vector<Detection> pooled;
  for (const auto& r : runs) {
    auto rw = reweight_detections(r, wt);
    pooled.insert(pooled.end(), rw.begin(), rw.end());
  }
  return per_class_nms(pooled, tt);
}

enum class ThresholdObjective {
  paper,    // AP(h) + 1 / (h - d)^2
  penalty,  // AP(h) - lambda * (h - d)^2
};

inline double threshold_objective(double ap, double h, double d, ThresholdObjective mode, double lambda) {
  const double dev = h - d;
  return mode == ThresholdObjective::paper ? ap + 1.0 / (dev * dev) : ap - lambda * dev * dev;
}

inline void check_threshold_grid(std::span<const double> grid, double d, ThresholdObjective mode, double lambda) {
  if (grid.empty()) throw usage_error("NMS threshold grid is empty");
  if (!(d > 0.0 && d < 1.0)) throw usage_error("default NMS threshold must lie in (0,1)");
  if (!(lambda >= 0.0)) throw usage_error("lambda must be >= 0");
  for (double h : grid) {
    if (!(h > 0.0 && h < 1.0)) throw usage_error("grid threshold outside (0,1): " + std::to_string(h));
    if (mode == ThresholdObjective::paper && h == d)
      throw usage_error("grid contains the default threshold; the unpenalized objective diverges there");
  }
}

// Best grid threshold for one category given its AP at each grid point.
// Objective values within 1e-12 (relative) are ties, resolved toward the
// threshold nearest d and then the smaller threshold.
inline double select_threshold(std::span<const double> grid, std::span<const double> ap, double d,
                               ThresholdObjective mode, double lambda) {
  check_threshold_grid(grid, d, mode, lambda);
  if (ap.size() != grid.size()) throw usage_error("AP profile length differs from grid length");
  std::size_t best = 0;
  double best_val = threshold_objective(ap[0], grid[0], d, mode, lambda);
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const double v = threshold_objective(ap[i], grid[i], d, mode, lambda);
    const double tol = 1e-12 * std::max({1.0, std::abs(v), std::abs(best_val)});
    bool take = false;
    if (v > best_val + tol) {
      take = true;
    } else if (std::abs(v - best_val) <= tol) {
      const double di = std::abs(grid[i] - d);
      const double db = std::abs(grid[best] - d);
      take = di < db || (di == db && grid[i] < grid[best]);
    }
    if (take) {
      best = i;
      best_val = v;
    }
  }
  return grid[best];
}

struct ThresholdSearchOptions {
  double default_threshold = 0.5;
  std::vector<double> grid;
  ThresholdObjective mode = ThresholdObjective::penalty;
  double lambda = 1.0;
  double iou_thr = 0.5;
  unsigned jobs = 1;
};

struct ThresholdSearchResult {
  ThresholdTable table;
  std::map<LabelId, std::vector<double>> ap_profiles;  // AP at each grid point
};

// Detections and ground truth are expanded to ancestors first, so each
// category's AP depends only on its own threshold and the search is exact
// per category. Categories without ground truth keep the default.
inline ThresholdSearchResult search_nms_threshold_profiles(std::span<const Detection> dets,
                                                           std::span<const GroundTruthBox> gts,
                                                           const LabelHierarchy& h,
                                                           const ThresholdSearchOptions& opt) {
  check_threshold_grid(opt.grid, opt.default_threshold, opt.mode, opt.lambda);
  check_iou_threshold(opt.iou_thr);
  const auto xg = expand_ground_truth(h, gts);
  const auto xd = expand_detections(h, dets, ExpansionMode::ancestors);

  std::map<LabelId, std::vector<GroundTruthBox>> gt_by_label;
  for (const auto& g : xg) gt_by_label[g.label].push_back(g);
  std::map<LabelId, std::map<std::string, std::vector<Detection>>> det_groups;
  for (const auto& d : xd) det_groups[d.label][d.image_id].push_back(d);

  std::vector<LabelId> labels;
  for (const auto& [l, v] : gt_by_label) labels.push_back(l);
  std::vector<std::vector<double>> profiles(labels.size());

  parallel_for(labels.size(), opt.jobs, [&](std::size_t li) {
    const auto& label = labels[li];
    const auto& label_gts = gt_by_label.at(label);
    auto groups = det_groups.find(label);
    auto& profile = profiles[li];
    for (double thr : opt.grid) {
      std::vector<Detection> kept;
      if (groups != det_groups.end()) {
        for (const auto& [img, group] : groups->second) {
          auto k = nms(group, thr);
          kept.insert(kept.end(), k.begin(), k.end());
        }
      }
      const auto matches = match_detections(kept, label_gts, opt.iou_thr);
      profile.push_back(average_precision(matches.at(label)).value_or(0.0));
    }
  });

  ThresholdSearchResult result{ThresholdTable(opt.default_threshold), {}};
  for (const auto& l : h.labels()) result.table.set(l, opt.default_threshold);
  for (std::size_t li = 0; li < labels.size(); ++li) {
    result.table.set(labels[li], select_threshold(opt.grid, profiles[li], opt.default_threshold, opt.mode, opt.lambda));
    result.ap_profiles[labels[li]] = std::move(profiles[li]);
  }
  return result;
}

inline ThresholdTable search_nms_thresholds(std::span<const Detection> dets, std::span<const GroundTruthBox> gts,
                                            const LabelHierarchy& h, const ThresholdSearchOptions& opt) {
  return search_nms_threshold_profiles(dets, gts, h, opt).table;
}

}  // namespace detkit
