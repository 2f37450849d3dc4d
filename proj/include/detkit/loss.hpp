#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "detkit/error.hpp"
#include "detkit/labelspace.hpp"

namespace detkit {

inline void check_logits(std::span<const double> x) {
  if (x.size() < 2) throw data_error("logits need at least 2 classes, got " + std::to_string(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) throw data_error("non-finite logit at index " + std::to_string(i));
  }
}

// Target vector with k nonzero entries, each exactly 1/k.
class LabelDistribution {
 public:
  static LabelDistribution from_active(std::size_t num_classes, std::span<const std::size_t> active) {
    std::set<std::size_t> unique(active.begin(), active.end());
    if (unique.empty()) throw data_error("label distribution needs at least one active class");
    if (*unique.rbegin() >= num_classes)
      throw data_error("active class " + std::to_string(*unique.rbegin()) + " out of range for " +
                       std::to_string(num_classes) + " classes");
    LabelDistribution d;
    d.values_.assign(num_classes, 0.0);
    d.active_.assign(unique.begin(), unique.end());
    const double w = 1.0 / static_cast<double>(d.active_.size());
    for (std::size_t i : d.active_) d.values_[i] = w;
    return d;
  }

  static LabelDistribution one_hot(std::size_t num_classes, std::size_t target) {
    const std::size_t idx[] = {target};
    return from_active(num_classes, idx);
  }

  // Accepts a dense vector whose nonzero entries all equal 1/k within `tol`.
  static LabelDistribution from_dense(std::span<const double> y, double tol = 1e-6) {
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (!std::isfinite(y[i]) || y[i] < 0.0) throw data_error("invalid target entry at index " + std::to_string(i));
      if (y[i] > tol) active.push_back(i);
    }
    if (active.empty()) throw data_error("target vector has no nonzero entry");
    const double w = 1.0 / static_cast<double>(active.size());
    for (std::size_t i : active) {
      if (std::abs(y[i] - w) > tol)
        throw data_error("target entry " + std::to_string(i) + " is not 1/" + std::to_string(active.size()));
    }
    return from_active(y.size(), active);
  }

  std::size_t size() const { return values_.size(); }
  std::size_t k() const { return active_.size(); }
  std::span<const double> values() const { return values_; }
  std::span<const std::size_t> active() const { return active_; }
  double operator[](std::size_t i) const { return values_[i]; }

 private:
  std::vector<double> values_;
  std::vector<std::size_t> active_;
};

inline double log_sum_exp(std::span<const double> x) {
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

inline std::vector<double> softmax(std::span<const double> x) {
  check_logits(x);
  const double m = *std::max_element(x.begin(), x.end());
  std::vector<double> p(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    p[i] = std::exp(x[i] - m);
    s += p[i];
  }
  for (double& v : p) v /= s;
  return p;
}

// -log softmax(x)[target]
inline double standard_softmax_ce(std::span<const double> x, std::size_t target) {
  check_logits(x);
  if (target >= x.size())
    throw data_error("target " + std::to_string(target) + " out of range for " + std::to_string(x.size()) +
                     " classes");
  return log_sum_exp(x) - x[target];
}

inline void check_dims(std::span<const double> x, const LabelDistribution& y) {
  if (x.size() != y.size())
    throw data_error("dimension mismatch: " + std::to_string(x.size()) + " logits vs " + std::to_string(y.size()) +
                     " targets");
}

// -sum_c y_c log softmax(x)[c]; since sum(y) = 1 this is lse(x) - <y, x>.
inline double distributed_softmax_ce(std::span<const double> x, const LabelDistribution& y) {
  check_logits(x);
  check_dims(x, y);
  double dot = 0.0;
  for (std::size_t i : y.active()) dot += x[i];
  dot /= static_cast<double>(y.k());
  return log_sum_exp(x) - dot;
}

inline std::vector<double> distributed_softmax_grad(std::span<const double> x, const LabelDistribution& y) {
  check_dims(x, y);
  auto g = softmax(x);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] -= y[i];
  return g;
}

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
inline double finite_diff_check(std::span<const double> x, const LabelDistribution& y, double epsilon = 1e-5) {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw usage_error("finite_diff_check: epsilon must be > 0");
  const auto g = distributed_softmax_grad(x, y);
  std::vector<double> probe(x.begin(), x.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + epsilon;
    const double up = distributed_softmax_ce(probe, y);
    probe[i] = orig - epsilon;
    const double down = distributed_softmax_ce(probe, y);
    probe[i] = orig;
    const double fd = (up - down) / (2.0 * epsilon);
    if (!std::isfinite(fd)) throw data_error("finite_diff_check: non-finite difference at index " + std::to_string(i));
    worst = std::max(worst, std::abs(g[i] - fd) / std::max(1.0, std::abs(g[i])));
  }
  return worst;
}

// Active set is {leaf} plus its ancestors, plus its ambiguity partners when
// requested; each gets weight 1/k. label_index must be a bijection onto
// [0, C).
inline LabelDistribution build_label_distribution(const LabelHierarchy& h, const LabelId& leaf,
                                                  bool include_ambiguity,
                                                  const std::map<LabelId, std::size_t>& label_index) {
  const std::size_t num_classes = label_index.size();
  std::vector<bool> used(num_classes, false);
  for (const auto& [label, idx] : label_index) {
    if (idx >= num_classes || used[idx])
      throw data_error("label index is not a bijection onto [0," + std::to_string(num_classes) + "): " + label);
    used[idx] = true;
  }
  if (!h.contains(leaf)) throw HierarchyError(HierarchyErrorKind::unknown_label, leaf, "unknown label");
  const auto mode = include_ambiguity ? ExpansionMode::ancestors_and_ambiguity : ExpansionMode::ancestors;
  std::vector<LabelId> members{leaf};
  const auto targets = h.expansion_targets(leaf, mode);
  members.insert(members.end(), targets.begin(), targets.end());
  std::vector<std::size_t> active;
  for (const auto& m : members) {
    auto it = label_index.find(m);
    if (it == label_index.end()) throw data_error("label index has no entry for " + m);
    active.push_back(it->second);
  }
  return LabelDistribution::from_active(num_classes, active);
}

}  // namespace detkit
