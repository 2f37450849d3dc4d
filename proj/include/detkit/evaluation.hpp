#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "detkit/boxes.hpp"
#include "detkit/error.hpp"
#include "detkit/labelspace.hpp"

namespace detkit {

// Ranked detections of one label with their TP/FP outcome.
struct LabelMatches {
  std::vector<double> scores;       // descending
  std::vector<bool> true_positive;  // parallel to scores
  std::size_t num_gt = 0;

  std::size_t num_tp() const {
    return static_cast<std::size_t>(std::count(true_positive.begin(), true_positive.end(), true));
  }
};

using MatchResult = std::map<LabelId, LabelMatches>;

struct EvalReport {
  std::map<LabelId, double> ap;                 // labels with at least one ground truth
  std::map<LabelId, std::size_t> num_gt;
  std::vector<LabelId> without_ground_truth;    // detected labels excluded from the mean
  double mean_ap = 0.0;
};

inline void check_iou_threshold(double iou_thr) {
  if (!(iou_thr > 0.0 && iou_thr <= 1.0))
    throw usage_error("IoU threshold must lie in (0,1], got " + std::to_string(iou_thr));
}

// Detections are visited by descending score (ties: image id, box, input
// position). Each one claims the unmatched ground truth of the same image and
// label with the highest IoU >= iou_thr, or is a false positive.
inline MatchResult match_detections(std::span<const Detection> dets, std::span<const GroundTruthBox> gts,
                                    double iou_thr = 0.5) {
  check_iou_threshold(iou_thr);
  using GroupKey = std::pair<std::string, LabelId>;
  struct Group {
    std::vector<BBox> boxes;
    std::vector<bool> taken;
  };
  std::map<GroupKey, Group> groups;
  MatchResult result;
  for (const auto& g : gts) {
    auto& grp = groups[{g.image_id, g.label}];
    grp.boxes.push_back(g.box);
    grp.taken.push_back(false);
    ++result[g.label].num_gt;
  }

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& da = dets[a];
    const auto& db = dets[b];
    if (da.score != db.score) return da.score > db.score;
    if (da.image_id != db.image_id) return da.image_id < db.image_id;
    return da.box < db.box;
  });

  for (std::size_t i : order) {
    const auto& d = dets[i];
    auto& lm = result[d.label];
    bool tp = false;
    if (auto it = groups.find({d.image_id, d.label}); it != groups.end()) {
      auto& grp = it->second;
      std::optional<std::size_t> best;
      double best_iou = -1.0;
      for (std::size_t j = 0; j < grp.boxes.size(); ++j) {
        if (grp.taken[j]) continue;
        const double v = iou(d.box, grp.boxes[j]);
        if (v >= iou_thr && v > best_iou) {
          best = j;
          best_iou = v;
        }
      }
      if (best) {
        grp.taken[*best] = true;
        tp = true;
      }
    }
    lm.scores.push_back(d.score);
    lm.true_positive.push_back(tp);
  }
  return result;
}

// All-point interpolated AP: the precision envelope is made non-increasing,
// then integrated over recall. nullopt when the label has no ground truth.
inline std::optional<double> average_precision(const LabelMatches& m) {
  if (m.num_gt == 0) return std::nullopt;
  const std::size_t n = m.true_positive.size();
  std::vector<double> precision(n);
  std::vector<double> recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (m.true_positive[i]) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(m.num_gt);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (recall[i] > prev_recall) {
      ap += (recall[i] - prev_recall) * precision[i];
      prev_recall = recall[i];
    }
  }
  return std::clamp(ap, 0.0, 1.0);
}

inline EvalReport report_from_matches(const MatchResult& matches) {
  EvalReport r;
  double sum = 0.0;
  for (const auto& [label, m] : matches) {
    if (auto ap = average_precision(m)) {
      r.ap[label] = *ap;
      r.num_gt[label] = m.num_gt;
      sum += *ap;
    } else {
      r.without_ground_truth.push_back(label);
    }
  }
  r.mean_ap = r.ap.empty() ? 0.0 : sum / static_cast<double>(r.ap.size());
  return r;
}

// Per-label evaluation with no label expansion.
inline EvalReport evaluate_flat(std::span<const Detection> dets, std::span<const GroundTruthBox> gts,
                                double iou_thr = 0.5) {
  return report_from_matches(match_detections(dets, gts, iou_thr));
}

// Challenge protocol: ground truth and detections are both expanded to
// ancestors before per-label matching.
inline EvalReport hierarchical_map(std::span<const Detection> dets, std::span<const GroundTruthBox> gts,
                                   const LabelHierarchy& h, double iou_thr = 0.5) {
  const auto xg = expand_ground_truth(h, gts);
  const auto xd = expand_detections(h, dets, ExpansionMode::ancestors);
  return evaluate_flat(xd, xg, iou_thr);
}

// Sparse (ground-truth label x predicted label) count table.
class ConfusionMatrix {
 public:
  void add(const LabelId& gt, const LabelId& predicted, std::size_t n = 1) {
    if (n != 0) cells_[{gt, predicted}] += n;
  }

  std::size_t count(const LabelId& gt, const LabelId& predicted) const {
    auto it = cells_.find({gt, predicted});
    return it == cells_.end() ? 0 : it->second;
  }

  std::size_t total() const {
    std::size_t t = 0;
    for (const auto& [k, v] : cells_) t += v;
    return t;
  }

  std::size_t off_diagonal_total() const {
    std::size_t t = 0;
    for (const auto& [k, v] : cells_) {
      if (k.first != k.second) t += v;
    }
    return t;
  }

  const std::map<std::pair<LabelId, LabelId>, std::size_t>& cells() const { return cells_; }

 private:
  std::map<std::pair<LabelId, LabelId>, std::size_t> cells_;
};

// Each detection with score >= score_thr is assigned to its best-overlapping
// ground truth in the same image (any label; an equal-IoU same-label box
// wins). If that IoU reaches iou_thr, cell (gt label, detected label) is
// incremented.
inline ConfusionMatrix confusion_matrix(std::span<const Detection> dets, std::span<const GroundTruthBox> gts,
                                        const LabelHierarchy& h, double iou_thr = 0.5, double score_thr = 0.0) {
  check_iou_threshold(iou_thr);
  if (!(score_thr >= 0.0 && score_thr <= 1.0))
    throw usage_error("score threshold must lie in [0,1], got " + std::to_string(score_thr));
  std::map<std::string, std::vector<const GroundTruthBox*>> by_image;
  for (const auto& g : gts) {
    if (!h.contains(g.label)) throw HierarchyError(HierarchyErrorKind::unknown_label, g.label, "unknown label");
    by_image[g.image_id].push_back(&g);
  }
  ConfusionMatrix cm;
  for (const auto& d : dets) {
    if (!h.contains(d.label)) throw HierarchyError(HierarchyErrorKind::unknown_label, d.label, "unknown label");
    if (d.score < score_thr) continue;
    auto it = by_image.find(d.image_id);
    if (it == by_image.end()) continue;
    const GroundTruthBox* best = nullptr;
    double best_iou = -1.0;
    for (const GroundTruthBox* g : it->second) {
      const double v = iou(d.box, g->box);
      const bool better = v > best_iou || (v == best_iou && g->label == d.label && best->label != d.label);
      if (better) {
        best = g;
        best_iou = v;
      }
    }
    if (best && best_iou >= iou_thr) cm.add(best->label, d.label);
  }
  return cm;
}

// Labels outside the expert subset ranked by how often their ground truth is
// predicted as a subset label. Zero-mass labels are omitted.
inline std::vector<LabelId> confusable_categories(const ConfusionMatrix& cm, const std::set<LabelId>& expert_subset,
                                                  std::size_t top_n) {
  if (expert_subset.empty()) throw usage_error("confusable_categories: empty expert subset");
  if (top_n == 0) throw usage_error("confusable_categories: top_n must be >= 1");
  std::map<LabelId, std::size_t> mass;
  for (const auto& [cell, n] : cm.cells()) {
    const auto& [gt, pred] = cell;
    if (expert_subset.count(gt) == 0 && expert_subset.count(pred) != 0) mass[gt] += n;
  }
  std::vector<std::pair<LabelId, std::size_t>> ranked(mass.begin(), mass.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<LabelId> out;
  for (const auto& [label, n] : ranked) {
    if (out.size() == top_n) break;
    out.push_back(label);
  }
  return out;
}

}  // namespace detkit
