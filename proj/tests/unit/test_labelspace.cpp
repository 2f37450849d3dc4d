#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "detkit/labelspace.hpp"
#include "detkit/rng.hpp"

using namespace detkit;

namespace {

LabelHierarchy chain() {
  return load_hierarchy_text(R"({"nodes":[{"id":"A","name":"a"},{"id":"B","name":"b"},{"id":"C","name":"c"}],
    "edges":[{"child":"B","parent":"A"},{"child":"C","parent":"B"}]})");
}

LabelHierarchy diamond() {
  return load_hierarchy_text(R"({"nodes":[{"id":"A"},{"id":"B"},{"id":"C"},{"id":"D"}],
    "edges":[{"child":"B","parent":"A"},{"child":"C","parent":"A"},
             {"child":"D","parent":"B"},{"child":"D","parent":"C"}]})");
}

HierarchyErrorKind load_error(const std::string& text, std::string* id = nullptr) {
  try {
    load_hierarchy_text(text);
  } catch (const HierarchyError& e) {
    if (id) *id = e.offending_id();
    return e.hierarchy_kind();
  }
  ADD_FAILURE() << "expected a hierarchy error";
  return HierarchyErrorKind::malformed;
}

// Closure by plain DFS, no ordering.
std::set<LabelId> closure(const LabelHierarchy& h, const LabelId& l) {
  std::set<LabelId> out;
  std::vector<LabelId> todo = h.parents(l);
  while (!todo.empty()) {
    auto p = todo.back();
    todo.pop_back();
    if (out.insert(p).second)
      for (const auto& q : h.parents(p)) todo.push_back(q);
  }
  return out;
}

}  // namespace

TEST(Hierarchy, ChainAncestors) {
  const auto h = chain();
  EXPECT_EQ(ancestors(h, "C"), (std::vector<LabelId>{"B", "A"}));
  EXPECT_TRUE(ancestors(h, "A").empty());
  EXPECT_EQ(h.name("B"), "b");
}

TEST(Hierarchy, DiamondListsSharedAncestorOnce) {
  EXPECT_EQ(ancestors(diamond(), "D"), (std::vector<LabelId>{"B", "C", "A"}));
}

TEST(Hierarchy, LoadErrorsNameTheOffender) {
  std::string id;
  EXPECT_EQ(load_error(R"({"nodes":[{"id":"A"}],"edges":[{"child":"A","parent":"Z"}]})", &id),
            HierarchyErrorKind::dangling_edge);
  EXPECT_EQ(id, "Z");
  EXPECT_EQ(load_error(R"({"nodes":[{"id":"A"},{"id":"B"}],
      "edges":[{"child":"A","parent":"B"},{"child":"B","parent":"A"}]})"),
            HierarchyErrorKind::cycle);
  EXPECT_EQ(load_error(R"({"nodes":[{"id":"A"},{"id":"A"}]})", &id), HierarchyErrorKind::duplicate_id);
  EXPECT_EQ(id, "A");
  EXPECT_EQ(load_error(R"({"nodes":[{"id":"A"}],"edges":[{"child":"A","parent":"A"}]})"),
            HierarchyErrorKind::self_edge);
  EXPECT_EQ(load_error(R"({"edges":[]})"), HierarchyErrorKind::malformed);
  EXPECT_EQ(load_error("not json"), HierarchyErrorKind::malformed);
  EXPECT_EQ(load_error(R"({"nodes":[{"id":"A"},{"id":"B"}],"edges":[{"child":"B","parent":"A"}],
      "ambiguity_groups":[["A","B"]]})"),
            HierarchyErrorKind::ambiguity_conflict);
}

TEST(Hierarchy, UnknownLabelIsAnError) {
  const auto h = chain();
  EXPECT_THROW(ancestors(h, "Q"), HierarchyError);
  const std::vector<GroundTruthBox> g{{"i", "Q", {0, 0, 1, 1}}};
  EXPECT_THROW(expand_ground_truth(h, g), HierarchyError);
}

TEST(ExpandGroundTruth, ChainRootAndDiamond) {
  const BBox b{0.1, 0.1, 0.5, 0.5};
  std::vector<GroundTruthBox> g{{"i", "C", b}};
  auto out = expand_ground_truth(chain(), g);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[1].label, "B");
  EXPECT_EQ(out[2].label, "A");
  for (const auto& o : out) EXPECT_EQ(o.box, b);

  g[0].label = "A";
  EXPECT_EQ(expand_ground_truth(chain(), g).size(), 1u);

  g[0].label = "D";
  out = expand_ground_truth(diamond(), g);
  ASSERT_EQ(out.size(), 4u);
  EXPECT_EQ(std::count_if(out.begin(), out.end(), [](const auto& x) { return x.label == "A"; }), 1);
}

TEST(ExpandDetections, AncestorsAndAmbiguity) {
  const auto h = load_hierarchy_text(R"({"nodes":[{"id":"A"},{"id":"B"},{"id":"C"},{"id":"X"},{"id":"Y"}],
    "edges":[{"child":"B","parent":"A"},{"child":"C","parent":"B"}],"ambiguity_groups":[["X","Y"]]})");
  const BBox b{0.2, 0.2, 0.4, 0.4};
  std::vector<Detection> d{{"i", "C", 0.7, b}};
  auto out = expand_detections(h, d, ExpansionMode::ancestors);
  ASSERT_EQ(out.size(), 3u);
  for (const auto& o : out) EXPECT_EQ(o.score, 0.7);

  d[0].label = "X";
  EXPECT_EQ(expand_detections(h, d, ExpansionMode::ancestors).size(), 1u);
  out = expand_detections(h, d, ExpansionMode::ancestors_and_ambiguity);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[1].label, "Y");

  d[0].label = "A";
  EXPECT_EQ(expand_detections(h, d, ExpansionMode::ancestors_and_ambiguity).size(), 1u);
}

TEST(ExpandDetections, DuplicatesKeepHighestScore) {
  const BBox b{0.2, 0.2, 0.4, 0.4};
  const std::vector<Detection> d{{"i", "C", 0.3, b}, {"i", "B", 0.8, b}};
  const auto out = expand_detections(chain(), d, ExpansionMode::ancestors);
  ASSERT_EQ(out.size(), 3u);
  std::map<LabelId, double> s;
  for (const auto& o : out) s[o.label] = o.score;
  EXPECT_EQ(s["C"], 0.3);
  EXPECT_EQ(s["B"], 0.8);
  EXPECT_EQ(s["A"], 0.8);
}

// Random DAGs: edges only from higher to lower index, so acyclic.
TEST(HierarchyProperty, ClosureCountsAndIdempotence) {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_index(10));
    std::vector<LabelNode> nodes;
    std::vector<ParentEdge> edges;
    for (int i = 0; i < n; ++i) nodes.push_back({"L" + std::to_string(i), ""});
    for (int c = 1; c < n; ++c)
      for (int p = 0; p < c; ++p)
        if (rng.bernoulli(0.3)) edges.push_back({nodes[c].id, nodes[p].id});
    const LabelHierarchy h(nodes, edges, {});

    std::vector<GroundTruthBox> gts;
    std::size_t expected = 0;
    for (int i = 0; i < 20; ++i) {
      const auto& l = nodes[rng.uniform_index(n)].id;
      const auto a = h.ancestors(l);
      EXPECT_EQ(std::set<LabelId>(a.begin(), a.end()), closure(h, l));
      EXPECT_EQ(std::set<LabelId>(a.begin(), a.end()).size(), a.size());
      EXPECT_EQ(std::count(a.begin(), a.end(), l), 0);
      // distinct boxes so no triple collides
      gts.push_back({"img", l, {0.01 * i, 0, 0.01 * i + 0.005, 1}});
      expected += 1 + a.size();
    }
    const auto once = expand_ground_truth(h, gts);
    EXPECT_EQ(once.size(), expected);
    const auto twice = expand_ground_truth(h, once);
    EXPECT_EQ(once.size(), twice.size());
    for (std::size_t i = 0; i < once.size(); ++i) {
      EXPECT_EQ(once[i].label, twice[i].label);
      EXPECT_EQ(once[i].box, twice[i].box);
    }
  }
}

TEST(Hierarchy, ToyFileLoads) {
  std::ifstream in(std::string(DETKIT_DATA_DIR) + "/toy/hierarchy.json");
  std::stringstream ss;
  ss << in.rdbuf();
  const auto h = load_hierarchy_text(ss.str());
  EXPECT_EQ(h.size(), 5u);
  EXPECT_EQ(h.ambiguity_partners("/m/torch"), (std::vector<LabelId>{"/m/flashlight"}));
  EXPECT_EQ(ancestors(h, "/m/cat"), (std::vector<LabelId>{"/m/animal"}));
}
