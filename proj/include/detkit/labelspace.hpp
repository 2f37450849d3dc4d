#pragma once

#include <algorithm>
#include <map>
#include <queue>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "detkit/boxes.hpp"
#include "detkit/error.hpp"

namespace detkit {

enum class HierarchyErrorKind {
  malformed,
  duplicate_id,
  dangling_edge,
  self_edge,
  cycle,
  ambiguity_conflict,
  unknown_label,
};

class HierarchyError : public Error {
 public:
  HierarchyError(HierarchyErrorKind kind, LabelId id, const std::string& what)
      : Error(ErrorKind::data, what + " [" + id + "]"), kind_(kind), id_(std::move(id)) {}

  HierarchyErrorKind hierarchy_kind() const noexcept { return kind_; }
  const LabelId& offending_id() const noexcept { return id_; }

 private:
  HierarchyErrorKind kind_;
  LabelId id_;
};

struct LabelNode {
  LabelId id;
  std::string name;
};

struct ParentEdge {
  LabelId child;
  LabelId parent;
};

enum class ExpansionMode { ancestors, ancestors_and_ambiguity };

// Immutable label DAG with ambiguity groups. All closures are computed at
// construction, so queries are lookups and the object is safe to share
// across threads.
class LabelHierarchy {
 public:
  LabelHierarchy() = default;

  LabelHierarchy(std::span<const LabelNode> nodes, std::span<const ParentEdge> edges,
                 std::span<const std::vector<LabelId>> ambiguity_groups) {
    for (const auto& n : nodes) {
      if (n.id.empty()) throw HierarchyError(HierarchyErrorKind::malformed, n.id, "empty label id");
      if (!entries_.emplace(n.id, Entry{n.name, {}, {}, {}}).second)
        throw HierarchyError(HierarchyErrorKind::duplicate_id, n.id, "duplicate label id");
    }
    for (const auto& e : edges) {
      if (!contains(e.child))
        throw HierarchyError(HierarchyErrorKind::dangling_edge, e.child, "edge child is not a node");
      if (!contains(e.parent))
        throw HierarchyError(HierarchyErrorKind::dangling_edge, e.parent, "edge parent is not a node");
      if (e.child == e.parent)
        throw HierarchyError(HierarchyErrorKind::self_edge, e.child, "self edge");
      auto& ps = entries_.at(e.child).parents;
      if (std::find(ps.begin(), ps.end(), e.parent) == ps.end()) ps.push_back(e.parent);
    }
    for (auto& [id, entry] : entries_) std::sort(entry.parents.begin(), entry.parents.end());
    check_acyclic();
    for (auto& [id, entry] : entries_) entry.ancestors = ordered_closure(id);

    for (const auto& group : ambiguity_groups) {
      std::vector<LabelId> members(group.begin(), group.end());
      std::sort(members.begin(), members.end());
      members.erase(std::unique(members.begin(), members.end()), members.end());
      if (members.size() < 2)
        throw HierarchyError(HierarchyErrorKind::malformed, members.empty() ? "" : members.front(),
                             "ambiguity group needs at least two distinct labels");
      for (const auto& m : members) {
        if (!contains(m))
          throw HierarchyError(HierarchyErrorKind::dangling_edge, m, "ambiguity member is not a node");
      }
      for (const auto& a : members) {
        for (const auto& b : members) {
          if (a != b && is_ancestor(b, a))
            throw HierarchyError(HierarchyErrorKind::ambiguity_conflict, a,
                                 "ambiguity partner " + b + " is also an ancestor");
        }
      }
      for (const auto& a : members) {
        auto& partners = entries_.at(a).partners;
        for (const auto& b : members) {
          if (a != b && std::find(partners.begin(), partners.end(), b) == partners.end())
            partners.push_back(b);
        }
        std::sort(partners.begin(), partners.end());
      }
      groups_.push_back(std::move(members));
    }
  }

  // Parentless hierarchy over the given labels.
  static LabelHierarchy flat(std::span<const LabelId> labels) {
    std::set<LabelId> unique(labels.begin(), labels.end());
    std::vector<LabelNode> nodes;
    for (const auto& l : unique) nodes.push_back({l, l});
    return LabelHierarchy(nodes, {}, {});
  }

  bool contains(const LabelId& id) const { return entries_.count(id) != 0; }
  std::size_t size() const { return entries_.size(); }

  std::vector<LabelId> labels() const {
    std::vector<LabelId> out;
    out.reserve(entries_.size());
    for (const auto& [id, e] : entries_) out.push_back(id);
    return out;
  }

  const std::string& name(const LabelId& id) const { return entry(id).name; }
  const std::vector<LabelId>& parents(const LabelId& id) const { return entry(id).parents; }

  // Strict ancestors, nearest first: topological order of the ancestor
  // subgraph (children before parents), ties broken by id.
  const std::vector<LabelId>& ancestors(const LabelId& id) const { return entry(id).ancestors; }

  const std::vector<LabelId>& ambiguity_partners(const LabelId& id) const { return entry(id).partners; }

  const std::vector<std::vector<LabelId>>& ambiguity_groups() const { return groups_; }

  bool is_ancestor(const LabelId& candidate, const LabelId& of) const {
    const auto& a = ancestors(of);
    return std::find(a.begin(), a.end(), candidate) != a.end();
  }

  // Labels a box labeled `id` is duplicated to, excluding `id` itself.
  std::vector<LabelId> expansion_targets(const LabelId& id, ExpansionMode mode) const {
    std::vector<LabelId> out = ancestors(id);
    if (mode == ExpansionMode::ancestors_and_ambiguity) {
      for (const auto& p : ambiguity_partners(id)) {
        if (std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
      }
    }
    return out;
  }

 private:
  struct Entry {
    std::string name;
    std::vector<LabelId> parents;
    std::vector<LabelId> ancestors;
    std::vector<LabelId> partners;
  };

  const Entry& entry(const LabelId& id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw HierarchyError(HierarchyErrorKind::unknown_label, id, "unknown label");
    return it->second;
  }

  void check_acyclic() const {
    enum class Mark { none, active, done };
    std::map<LabelId, Mark> marks;
    for (const auto& [id, e] : entries_) marks[id] = Mark::none;
    // Iterative DFS; the stack holds (node, next parent index).
    for (const auto& [root, unused] : entries_) {
      if (marks[root] != Mark::none) continue;
      std::vector<std::pair<const LabelId*, std::size_t>> stack{{&root, 0}};
      marks[root] = Mark::active;
      while (!stack.empty()) {
        auto& [node, next] = stack.back();
        const auto& ps = entries_.at(*node).parents;
        if (next == ps.size()) {
          marks[*node] = Mark::done;
          stack.pop_back();
          continue;
        }
        const LabelId& p = ps[next++];
        if (marks[p] == Mark::active)
          throw HierarchyError(HierarchyErrorKind::cycle, p, "cycle in parent edges");
        if (marks[p] == Mark::none) {
          marks[p] = Mark::active;
          stack.emplace_back(&p, 0);
        }
      }
    }
  }

  std::vector<LabelId> ordered_closure(const LabelId& id) const {
    std::set<LabelId> closure;
    std::vector<LabelId> frontier{id};
    while (!frontier.empty()) {
      LabelId cur = std::move(frontier.back());
      frontier.pop_back();
      for (const auto& p : entries_.at(cur).parents) {
        if (closure.insert(p).second) frontier.push_back(p);
      }
    }
    // Kahn's algorithm on closure + {id}; in-degree counts children inside the subgraph.
    std::map<LabelId, int> pending;
    for (const auto& a : closure) pending[a] = 0;
    auto count_children = [&](const LabelId& n) {
      for (const auto& p : entries_.at(n).parents) ++pending[p];
    };
    count_children(id);
    for (const auto& a : closure) count_children(a);

    std::priority_queue<LabelId, std::vector<LabelId>, std::greater<>> ready;
    std::vector<LabelId> order;
    auto release = [&](const LabelId& n) {
      for (const auto& p : entries_.at(n).parents) {
        if (--pending[p] == 0) ready.push(p);
      }
    };
    release(id);
    while (!ready.empty()) {
      LabelId n = ready.top();
      ready.pop();
      order.push_back(n);
      release(n);
    }
    return order;
  }

  std::map<LabelId, Entry> entries_;
  std::vector<std::vector<LabelId>> groups_;
};

// Parses the hierarchy document:
//   {"nodes":[{"id","name"}], "edges":[{"child","parent"}], "ambiguity_groups":[[id,...]]}
inline LabelHierarchy load_hierarchy(const nlohmann::json& doc) {
  auto malformed = [](const std::string& what) {
    return HierarchyError(HierarchyErrorKind::malformed, "", "malformed hierarchy document: " + what);
  };
  if (!doc.is_object() || !doc.contains("nodes") || !doc["nodes"].is_array())
    throw malformed("expected an object with a \"nodes\" array");

  std::vector<LabelNode> nodes;
  for (const auto& n : doc["nodes"]) {
    if (!n.is_object() || !n.contains("id") || !n["id"].is_string()) throw malformed("node without string id");
    LabelNode node{n["id"].get<std::string>(), {}};
    node.name = n.contains("name") && n["name"].is_string() ? n["name"].get<std::string>() : node.id;
    nodes.push_back(std::move(node));
  }
  std::vector<ParentEdge> edges;
  if (doc.contains("edges")) {
    if (!doc["edges"].is_array()) throw malformed("\"edges\" must be an array");
    for (const auto& e : doc["edges"]) {
      if (!e.is_object() || !e.contains("child") || !e.contains("parent") || !e["child"].is_string() ||
          !e["parent"].is_string())
        throw malformed("edge needs string \"child\" and \"parent\"");
      edges.push_back({e["child"].get<std::string>(), e["parent"].get<std::string>()});
    }
  }
  std::vector<std::vector<LabelId>> groups;
  if (doc.contains("ambiguity_groups")) {
    if (!doc["ambiguity_groups"].is_array()) throw malformed("\"ambiguity_groups\" must be an array");
    for (const auto& g : doc["ambiguity_groups"]) {
      if (!g.is_array()) throw malformed("ambiguity group must be an array of ids");
      std::vector<LabelId> members;
      for (const auto& m : g) {
        if (!m.is_string()) throw malformed("ambiguity group member must be a string");
        members.push_back(m.get<std::string>());
      }
      groups.push_back(std::move(members));
    }
  }
  return LabelHierarchy(nodes, edges, groups);
}

inline LabelHierarchy load_hierarchy_text(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw HierarchyError(HierarchyErrorKind::malformed, "", std::string("hierarchy JSON: ") + e.what());
  }
  return load_hierarchy(doc);
}

inline std::vector<LabelId> ancestors(const LabelHierarchy& h, const LabelId& label) {
  return h.ancestors(label);
}

namespace detail {

using BoxKey = std::tuple<std::string, LabelId, double, double, double, double>;

inline BoxKey box_key(const std::string& image, const LabelId& label, const BBox& b) {
  return {image, label, b.x_min, b.y_min, b.x_max, b.y_max};
}

}  // namespace detail

// Every input box is kept; each one also gets a copy for each strict ancestor
// unless that (image, label, box) already exists. Expanding twice is the same
// as expanding once.
inline std::vector<GroundTruthBox> expand_ground_truth(const LabelHierarchy& h,
                                                       std::span<const GroundTruthBox> gts) {
  std::set<detail::BoxKey> seen;
  for (const auto& g : gts) {
    if (!h.contains(g.label)) throw HierarchyError(HierarchyErrorKind::unknown_label, g.label, "unknown label");
    seen.insert(detail::box_key(g.image_id, g.label, g.box));
  }
  std::vector<GroundTruthBox> out;
  out.reserve(gts.size());
  for (const auto& g : gts) {
    out.push_back(g);
    for (const auto& a : h.ancestors(g.label)) {
      if (seen.insert(detail::box_key(g.image_id, a, g.box)).second) out.push_back({g.image_id, a, g.box});
    }
  }
  return out;
}

// Copies each detection to its expansion targets with the same box and score.
// Repeated (image, label, box) triples collapse to one entry carrying the
// highest score, at the position of the first occurrence.
inline std::vector<Detection> expand_detections(const LabelHierarchy& h, std::span<const Detection> dets,
                                                ExpansionMode mode) {
  std::map<detail::BoxKey, std::size_t> where;
  std::vector<Detection> out;
  out.reserve(dets.size());
  auto put = [&](const Detection& d) {
    auto [it, inserted] = where.emplace(detail::box_key(d.image_id, d.label, d.box), out.size());
    if (inserted) {
      out.push_back(d);
    } else if (d.score > out[it->second].score) {
      out[it->second].score = d.score;
    }
  };
  for (const auto& d : dets) {
    if (!h.contains(d.label)) throw HierarchyError(HierarchyErrorKind::unknown_label, d.label, "unknown label");
  }
  for (const auto& d : dets) {
    put(d);
    for (const auto& t : h.expansion_targets(d.label, mode)) put(Detection{d.image_id, t, d.score, d.box});
  }
  return out;
}

}  // namespace detkit
