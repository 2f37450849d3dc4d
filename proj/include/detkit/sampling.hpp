#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "detkit/boxes.hpp"
#include "detkit/error.hpp"
#include "detkit/rng.hpp"

namespace detkit {

// Category <-> image incidence built from annotations. Both sides are kept
// sorted so draws do not depend on annotation order.
class DatasetIndex {
 public:
  DatasetIndex() = default;

  explicit DatasetIndex(std::span<const GroundTruthBox> gts) {
    std::map<LabelId, std::set<std::string>> by_category;
    for (const auto& g : gts) {
      by_category[g.label].insert(g.image_id);
      images_[g.image_id].insert(g.label);
    }
    for (auto& [label, imgs] : by_category) {
      categories_.push_back(label);
      category_images_.emplace_back(imgs.begin(), imgs.end());
    }
  }

  bool empty() const { return categories_.empty(); }
  std::size_t num_categories() const { return categories_.size(); }
  std::size_t num_images() const { return images_.size(); }

  const std::vector<LabelId>& categories() const { return categories_; }
  const std::vector<std::string>& images_of(std::size_t category) const { return category_images_.at(category); }

  const std::vector<std::string>& images_of(const LabelId& category) const {
    auto it = std::lower_bound(categories_.begin(), categories_.end(), category);
    if (it == categories_.end() || *it != category) throw data_error("category not in index: " + category);
    return category_images_[static_cast<std::size_t>(it - categories_.begin())];
  }

  const std::map<std::string, std::set<LabelId>>& image_categories() const { return images_; }

 private:
  std::vector<LabelId> categories_;
  std::vector<std::vector<std::string>> category_images_;
  std::map<std::string, std::set<LabelId>> images_;
};

inline DatasetIndex build_index(std::span<const GroundTruthBox> gts) { return DatasetIndex(gts); }

struct Draw {
  LabelId category;
  std::string image_id;

  friend bool operator==(const Draw&, const Draw&) = default;
};

struct SampleStream {
  std::uint64_t seed = 0;
  std::vector<Draw> draws;
};

// Stage 1: a category uniformly over indexed categories. Stage 2: an image
// uniformly over the images containing it.
inline Draw sample_one(const DatasetIndex& index, Rng& rng) {
  if (index.empty()) throw data_error("sample_one: empty dataset index");
  const std::size_t c = rng.uniform_index(index.num_categories());
  const auto& imgs = index.images_of(c);
  if (imgs.empty()) throw data_error("sample_one: category has no images: " + index.categories()[c]);
  const std::size_t i = rng.uniform_index(imgs.size());
  return {index.categories()[c], imgs[i]};
}

inline SampleStream sample_epoch(const DatasetIndex& index, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw usage_error("sample_epoch: n must be >= 1");
  if (index.empty()) throw data_error("sample_epoch: empty dataset index");
  Rng rng(seed);
  SampleStream s{seed, {}};
  s.draws.reserve(n);
  for (std::size_t i = 0; i < n; ++i) s.draws.push_back(sample_one(index, rng));
  return s;
}

// Stage-1 draw counts; every indexed category is present, possibly at zero.
inline std::map<LabelId, std::size_t> exposure_histogram(const SampleStream& stream, const DatasetIndex& index) {
  std::map<LabelId, std::size_t> h;
  for (const auto& c : index.categories()) h[c] = 0;
  for (const auto& d : stream.draws) ++h[d.category];
  return h;
}

}  // namespace detkit
