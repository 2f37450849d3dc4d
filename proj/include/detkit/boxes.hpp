#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "detkit/error.hpp"

namespace detkit {

using LabelId = std::string;

// Axis-aligned box in normalized [0,1] image coordinates.
struct BBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }

  auto tie() const { return std::tie(x_min, y_min, x_max, y_max); }
  friend bool operator==(const BBox& a, const BBox& b) { return a.tie() == b.tie(); }
  friend bool operator<(const BBox& a, const BBox& b) { return a.tie() < b.tie(); }
};

inline bool is_valid(const BBox& b) {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  return in_unit(b.x_min) && in_unit(b.y_min) && in_unit(b.x_max) && in_unit(b.y_max) &&
         b.x_min <= b.x_max && b.y_min <= b.y_max;
}

struct Detection {
  std::string image_id;
  LabelId label;
  double score = 0.0;
  BBox box;

  friend bool operator==(const Detection&, const Detection&) = default;
};

struct GroundTruthBox {
  std::string image_id;
  LabelId label;
  BBox box;

  friend bool operator==(const GroundTruthBox&, const GroundTruthBox&) = default;
};

inline double iou(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

// Clamps to the unit square. Returns nullopt when nothing of the box is left.
inline std::optional<BBox> clip_box(const BBox& b) {
  if (std::isnan(b.x_min) || std::isnan(b.y_min) || std::isnan(b.x_max) || std::isnan(b.y_max))
    throw data_error("clip_box: NaN coordinate");
  BBox c{std::clamp(b.x_min, 0.0, 1.0), std::clamp(b.y_min, 0.0, 1.0),
         std::clamp(b.x_max, 0.0, 1.0), std::clamp(b.y_max, 0.0, 1.0)};
  if (c.x_max <= c.x_min || c.y_max <= c.y_min) return std::nullopt;
  return c;
}

// Order used wherever detections are ranked: score descending, then box
// coordinates, then position in the input.
inline std::vector<std::size_t> score_order(std::span<const Detection> dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return dets[a].box < dets[b].box;
  });
  return order;
}

// Greedy NMS over detections of one image and one label. Output is sorted by
// score, descending; every kept pair has IoU <= threshold.
inline std::vector<Detection> nms(std::span<const Detection> dets, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw usage_error("nms: threshold must lie in (0,1), got " + std::to_string(threshold));
  if (dets.empty()) return {};
  for (const auto& d : dets) {
    if (d.image_id != dets.front().image_id || d.label != dets.front().label)
      throw data_error("nms: input mixes images or labels (" + dets.front().image_id + "/" +
                       dets.front().label + " vs " + d.image_id + "/" + d.label + ")");
  }
  std::vector<Detection> kept;
  for (std::size_t i : score_order(dets)) {
    const auto& cand = dets[i];
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return iou(k.box, cand.box) > threshold;
    });
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

}  // namespace detkit
