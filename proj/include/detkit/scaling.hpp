#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <functional>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "detkit/error.hpp"
#include "detkit/rng.hpp"

namespace detkit {

struct ScaleTriple {
  double depth = 1.0;
  double width = 1.0;
  double resolution = 1.0;  // coefficient

  auto tie() const { return std::tie(depth, width, resolution); }
  friend bool operator==(const ScaleTriple& a, const ScaleTriple& b) { return a.tie() == b.tie(); }
  friend bool operator<(const ScaleTriple& a, const ScaleTriple& b) { return a.tie() < b.tie(); }
};

// depth * width^2 * resolution^2 (FLOPs growth factor of the triple)
inline double constraint_value(const ScaleTriple& t) {
  return t.depth * t.width * t.width * t.resolution * t.resolution;
}

struct ScaleGrid {
  std::vector<double> depths;
  std::vector<double> widths;
  std::vector<double> resolutions;
  double target = 2.0;
  double tol = 0.05;
};

struct ScanRow {
  ScaleTriple triple;
  double constraint = 0.0;
  std::optional<double> score;  // only feasible triples are evaluated
};

struct ScaleSearchResult {
  ScaleTriple best;
  double best_score = 0.0;
  std::vector<ScanRow> scan;  // every grid triple, depth-major
};

template <typename Oracle>
concept ScaleOracle = std::invocable<Oracle&, const ScaleTriple&> &&
                      std::convertible_to<std::invoke_result_t<Oracle&, const ScaleTriple&>, double>;

// Exhaustive scan over the grid. Among triples with
// |constraint_value - target| <= tol the highest oracle score wins; ties go
// to the smaller constraint deviation, then the lexicographically smaller
// triple.
template <ScaleOracle Oracle>
ScaleSearchResult grid_search_base_scan(Oracle&& oracle, const ScaleGrid& grid) {
  if (grid.depths.empty() || grid.widths.empty() || grid.resolutions.empty())
    throw infeasible_error("scale grid has an empty axis");
  if (!(grid.tol >= 0.0)) throw usage_error("scale tolerance must be >= 0");
  for (const auto* axis : {&grid.depths, &grid.widths, &grid.resolutions}) {
    for (double v : *axis) {
      if (!(v > 0.0) || !std::isfinite(v)) throw usage_error("scale grid values must be positive and finite");
    }
  }

  ScaleSearchResult result;
  std::optional<std::tuple<double, double, ScaleTriple>> best;  // (score, deviation, triple)
  for (double d : grid.depths) {
    for (double w : grid.widths) {
      for (double r : grid.resolutions) {
        ScanRow row{{d, w, r}, 0.0, std::nullopt};
        row.constraint = constraint_value(row.triple);
        const double dev = std::abs(row.constraint - grid.target);
        if (dev <= grid.tol) {
          const double s = static_cast<double>(std::invoke(oracle, row.triple));
          if (!(s >= 0.0 && s <= 1.0))
            throw data_error("oracle score outside [0,1]: " + std::to_string(s));
          row.score = s;
          bool take = !best;
          if (best) {
            const auto& [bs, bdev, bt] = *best;
            take = s > bs || (s == bs && (dev < bdev || (dev == bdev && row.triple < bt)));
          }
          if (take) best.emplace(s, dev, row.triple);
        }
        result.scan.push_back(row);
      }
    }
  }
  if (!best) throw infeasible_error("no grid triple satisfies |d*w^2*r^2 - target| <= tol");
  result.best = std::get<2>(*best);
  result.best_score = std::get<0>(*best);
  return result;
}

template <ScaleOracle Oracle>
ScaleTriple grid_search_base(Oracle&& oracle, const ScaleGrid& grid) {
  return grid_search_base_scan(std::forward<Oracle>(oracle), grid).best;
}

inline ScaleTriple compound_scale(const ScaleTriple& base, double phi) {
  if (!(base.depth > 0.0 && base.width > 0.0 && base.resolution > 0.0))
    throw usage_error("compound_scale: base coefficients must be positive");
  if (!(phi >= 0.0) || !std::isfinite(phi)) throw usage_error("compound_scale: phi must be a finite value >= 0");
  return {std::pow(base.depth, phi), std::pow(base.width, phi), std::pow(base.resolution, phi)};
}

struct StagePlan {
  int blocks = 1;
  double width = 1.0;

  friend bool operator==(const StagePlan&, const StagePlan&) = default;
};

struct ArchPlan {
  std::vector<StagePlan> stages;
  double resolution = 1.0;  // coefficient

  friend bool operator==(const ArchPlan&, const ArchPlan&) = default;
};

// EfficientNet-B0 stage layout: block repeats and output channels per stage.
inline ArchPlan efficientnet_b0_plan() {
  return {{{1, 16}, {2, 24}, {2, 40}, {3, 80}, {3, 112}, {4, 192}, {1, 320}}, 1.0};
}

// Block counts scale by the depth coefficient (rounded up), widths by the
// width coefficient. With fix_resolution the resolution coefficient is 1.
// stage4_extra blocks are then added to the fourth stage.
inline ArchPlan plan_variant(const ArchPlan& base, const ScaleTriple& scaled, bool fix_resolution, int stage4_extra) {
  if (base.stages.empty()) throw usage_error("plan_variant: plan has no stages");
  if (stage4_extra < 0) throw usage_error("plan_variant: stage4_extra must be >= 0");
  if (stage4_extra > 0 && base.stages.size() < 4)
    throw usage_error("plan_variant: extra stage-4 blocks need at least 4 stages");
  if (!(scaled.depth > 0.0 && scaled.width > 0.0 && scaled.resolution > 0.0))
    throw usage_error("plan_variant: coefficients must be positive");
  ArchPlan out;
  out.resolution = fix_resolution ? 1.0 : base.resolution * scaled.resolution;
  for (const auto& s : base.stages) {
    if (s.blocks < 1) throw usage_error("plan_variant: stage block count must be >= 1");
    // Slack keeps products like 3 * 1.1 * (1/1.1) from rounding up spuriously.
    const double scaled_blocks = static_cast<double>(s.blocks) * scaled.depth;
    const int blocks = std::max(1, static_cast<int>(std::ceil(scaled_blocks - 1e-9)));
    out.stages.push_back({blocks, s.width * scaled.width});
  }
  if (stage4_extra > 0) out.stages[3].blocks += stage4_extra;
  return out;
}

inline nlohmann::json plan_to_json(const ArchPlan& plan) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : plan.stages) stages.push_back({{"blocks", s.blocks}, {"width", s.width}});
  return {{"stages", stages}, {"resolution", plan.resolution}};
}

inline ArchPlan plan_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("stages") || !j["stages"].is_array())
    throw data_error("architecture plan needs a \"stages\" array");
  ArchPlan plan;
  plan.resolution = j.value("resolution", 1.0);
  for (const auto& s : j["stages"]) {
    if (!s.is_object() || !s.contains("blocks")) throw data_error("plan stage needs \"blocks\"");
    plan.stages.push_back({s["blocks"].get<int>(), s.value("width", 1.0)});
  }
  if (plan.stages.empty()) throw data_error("architecture plan has no stages");
  return plan;
}

// Grid {1.00, 1.05, ..., 2.00} on each axis, built from integer hundredths.
inline std::vector<double> default_scale_axis() {
  std::vector<double> v;
  for (int i = 100; i <= 200; i += 5) v.push_back(i / 100.0);
  return v;
}

inline ScaleGrid default_scale_grid() {
  return {default_scale_axis(), default_scale_axis(), default_scale_axis(), 2.0, 0.05};
}

// Synthetic stand-ins for "train and evaluate a model at this triple". Each
// has a single known best feasible point on the default grid.
namespace oracles {

// Separable quadratic bowl peaked at (1.25, 1.10, 1.15); constraint 2.0003.
inline double separable_concave(const ScaleTriple& t) {
  const double q = (t.depth - 1.25) * (t.depth - 1.25) + (t.width - 1.10) * (t.width - 1.10) +
                   (t.resolution - 1.15) * (t.resolution - 1.15);
  return std::clamp(0.9 - 2.0 * q, 0.0, 1.0);
}

// Rosenbrock valley in (depth - 0.65, width) plus a resolution bowl; peak at
// (1.65, 1.00, 1.10), constraint 1.9965.
inline double rosenbrock(const ScaleTriple& t) {
  const double x = t.depth - 0.65;
  const double y = t.width;
  const double f = (1.0 - x) * (1.0 - x) + 10.0 * (y - x * x) * (y - x * x) +
                   10.0 * (t.resolution - 1.10) * (t.resolution - 1.10);
  return 1.0 / (1.0 + f);
}

// Flat plateau with deterministic jitter below 0.01 and one narrow peak at
// (1.40, 1.20, 1.00), constraint 2.016.
inline double noisy_plateau(const ScaleTriple& t) {
  auto q = [](double v) { return static_cast<std::uint64_t>(std::llround(v * 1000.0)); };
  const std::uint64_t h = mix64(q(t.depth) * 1000003ULL ^ mix64(q(t.width) * 7919ULL ^ q(t.resolution)));
  const double jitter = static_cast<double>(h >> 11) * 0x1.0p-53 * 0.01;
  const double dist2 = (t.depth - 1.40) * (t.depth - 1.40) + (t.width - 1.20) * (t.width - 1.20) +
                       (t.resolution - 1.00) * (t.resolution - 1.00);
  return 0.5 + jitter + 0.4 * std::exp(-dist2 / 0.005);
}

struct Builtin {
  const char* name;
  double (*fn)(const ScaleTriple&);
  ScaleTriple optimum;
};

inline const std::vector<Builtin>& builtins() {
  static const std::vector<Builtin> all = {
      {"separable-concave", &separable_concave, {1.25, 1.10, 1.15}},
      {"rosenbrock", &rosenbrock, {1.65, 1.00, 1.10}},
      {"noisy-plateau", &noisy_plateau, {1.40, 1.20, 1.00}},
  };
  return all;
}

inline const Builtin& find_builtin(const std::string& name) {
  for (const auto& b : builtins()) {
    if (name == b.name) return b;
  }
  throw usage_error("unknown builtin oracle: " + name);
}

}  // namespace oracles

}  // namespace detkit
