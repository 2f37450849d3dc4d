#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <unistd.h>

#include "detkit/boxes.hpp"
#include "detkit/ensembling.hpp"
#include "detkit/error.hpp"
#include "detkit/evaluation.hpp"

namespace detkit::io {

// Column order of box coordinates in detection / ground-truth files.
enum class CoordOrder {
  xy,           // XMin,YMin,XMax,YMax
  open_images,  // XMin,XMax,YMin,YMax
};

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes through a temporary file in the same directory and renames it into
// place, so a failed write never leaves a partial file behind.
inline void atomic_write(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body) {
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot write " + path.string());
    try {
      body(out);
    } catch (...) {
      out.close();
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw;
    }
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw data_error("I/O failure writing " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw data_error("cannot rename into " + path.string());
  }
}

inline std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// Minimal CSV reader: comma separated, no quoting, CR tolerated, blank lines skipped.
class CsvReader {
 public:
  CsvReader(std::string text, std::string source) : text_(std::move(text)), source_(std::move(source)) {}

  static CsvReader from_file(const std::filesystem::path& path) { return {read_text(path), path.string()}; }

  bool next(std::vector<std::string>& fields) {
    while (pos_ < text_.size()) {
      std::size_t end = text_.find('\n', pos_);
      if (end == std::string::npos) end = text_.size();
      std::string_view line(text_.data() + pos_, end - pos_);
      pos_ = end + 1;
      ++line_;
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      if (line.empty()) continue;
      fields.clear();
      std::size_t start = 0;
      while (true) {
        const std::size_t comma = line.find(',', start);
        fields.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
      }
      return true;
    }
    return false;
  }

  void expect_header(const std::vector<std::string>& expected) {
    std::vector<std::string> got;
    if (!next(got)) throw error("missing header");
    if (got != expected) {
      std::string want;
      for (const auto& e : expected) want += (want.empty() ? "" : ",") + e;
      throw error("expected header " + want);
    }
  }

  std::vector<std::string> header() {
    std::vector<std::string> got;
    if (!next(got)) throw error("missing header");
    return got;
  }

  Error error(const std::string& what) const {
    return data_error(source_ + ":" + std::to_string(line_) + ": " + what);
  }

  double number(const std::string& field, const char* column) const {
    double v = 0.0;
    const char* first = field.data();
    const char* last = field.data() + field.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last || field.empty())
      throw error(std::string("bad number in column ") + column + ": '" + field + "'");
    return v;
  }

  std::size_t line() const { return line_; }

 private:
  std::string text_;
  std::string source_;
  std::size_t pos_ = 0;
  std::size_t line_ = 0;
};

namespace detail {

inline std::vector<std::string> coord_columns(CoordOrder order) {
  if (order == CoordOrder::open_images) return {"XMin", "XMax", "YMin", "YMax"};
  return {"XMin", "YMin", "XMax", "YMax"};
}

inline BBox parse_box(const CsvReader& r, const std::vector<std::string>& f, std::size_t first, CoordOrder order) {
  const double a = r.number(f[first], "XMin");
  const double b = r.number(f[first + 1], order == CoordOrder::xy ? "YMin" : "XMax");
  const double c = r.number(f[first + 2], order == CoordOrder::xy ? "XMax" : "YMin");
  const double d = r.number(f[first + 3], "YMax");
  BBox box = order == CoordOrder::xy ? BBox{a, b, c, d} : BBox{a, c, b, d};
  if (!is_valid(box)) throw r.error("box coordinates out of range or inverted");
  return box;
}

inline void check_width(const CsvReader& r, const std::vector<std::string>& f, std::size_t n) {
  if (f.size() != n)
    throw r.error("expected " + std::to_string(n) + " columns, got " + std::to_string(f.size()));
}

inline void write_box(std::ostream& out, const BBox& b) {
  out << fixed6(b.x_min) << ',' << fixed6(b.y_min) << ',' << fixed6(b.x_max) << ',' << fixed6(b.y_max);
}

}  // namespace detail

inline std::vector<std::string> detection_header(CoordOrder order = CoordOrder::xy) {
  std::vector<std::string> h{"ImageID", "LabelName", "Score"};
  for (auto& c : detail::coord_columns(order)) h.push_back(c);
  return h;
}

inline std::vector<std::string> ground_truth_header(CoordOrder order = CoordOrder::xy) {
  std::vector<std::string> h{"ImageID", "LabelName"};
  for (auto& c : detail::coord_columns(order)) h.push_back(c);
  return h;
}

inline std::vector<Detection> parse_detections(CsvReader& r, CoordOrder order = CoordOrder::xy) {
  r.expect_header(detection_header(order));
  std::vector<Detection> out;
  std::vector<std::string> f;
  while (r.next(f)) {
    detail::check_width(r, f, 7);
    Detection d{f[0], f[1], r.number(f[2], "Score"), detail::parse_box(r, f, 3, order)};
    if (d.image_id.empty() || d.label.empty()) throw r.error("empty ImageID or LabelName");
    if (!(d.score >= 0.0 && d.score <= 1.0)) throw r.error("score outside [0,1]");
    out.push_back(std::move(d));
  }
  return out;
}

inline std::vector<Detection> read_detections(const std::filesystem::path& path, CoordOrder order = CoordOrder::xy) {
  auto r = CsvReader::from_file(path);
  return parse_detections(r, order);
}

inline std::vector<GroundTruthBox> parse_ground_truth(CsvReader& r, CoordOrder order = CoordOrder::xy) {
  r.expect_header(ground_truth_header(order));
  std::vector<GroundTruthBox> out;
  std::vector<std::string> f;
  while (r.next(f)) {
    detail::check_width(r, f, 6);
    GroundTruthBox g{f[0], f[1], detail::parse_box(r, f, 2, order)};
    if (g.image_id.empty() || g.label.empty()) throw r.error("empty ImageID or LabelName");
    out.push_back(std::move(g));
  }
  return out;
}

inline std::vector<GroundTruthBox> read_ground_truth(const std::filesystem::path& path,
                                                     CoordOrder order = CoordOrder::xy) {
  auto r = CsvReader::from_file(path);
  return parse_ground_truth(r, order);
}

// Rows ordered by image, label, descending score, then box.
inline void format_detections(std::ostream& out, std::vector<Detection> dets) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    if (a.label != b.label) return a.label < b.label;
    if (a.score != b.score) return a.score > b.score;
    return a.box < b.box;
  });
  out << "ImageID,LabelName,Score,XMin,YMin,XMax,YMax\n";
  for (const auto& d : dets) {
    out << d.image_id << ',' << d.label << ',' << fixed6(d.score) << ',';
    detail::write_box(out, d.box);
    out << '\n';
  }
}

inline void write_detections(const std::vector<Detection>& dets, const std::filesystem::path& path) {
  atomic_write(path, [&](std::ostream& out) { format_detections(out, dets); });
}

inline void format_ground_truth(std::ostream& out, std::vector<GroundTruthBox> gts) {
  std::stable_sort(gts.begin(), gts.end(), [](const GroundTruthBox& a, const GroundTruthBox& b) {
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    if (a.label != b.label) return a.label < b.label;
    return a.box < b.box;
  });
  out << "ImageID,LabelName,XMin,YMin,XMax,YMax\n";
  for (const auto& g : gts) {
    out << g.image_id << ',' << g.label << ',';
    detail::write_box(out, g.box);
    out << '\n';
  }
}

inline void write_ground_truth(const std::vector<GroundTruthBox>& gts, const std::filesystem::path& path) {
  atomic_write(path, [&](std::ostream& out) { format_ground_truth(out, gts); });
}

// LabelName,AP[,NumGT] -> per-label AP.
inline std::map<LabelId, double> read_ap_table(const std::filesystem::path& path) {
  auto r = CsvReader::from_file(path);
  const auto h = r.header();
  if (h.size() < 2 || h[0] != "LabelName" || h[1] != "AP") throw r.error("expected header LabelName,AP[,NumGT]");
  std::map<LabelId, double> out;
  std::vector<std::string> f;
  while (r.next(f)) {
    detail::check_width(r, f, h.size());
    const double ap = r.number(f[1], "AP");
    if (!(ap >= 0.0 && ap <= 1.0)) throw r.error("AP outside [0,1]");
    if (!out.emplace(f[0], ap).second) throw r.error("duplicate label " + f[0]);
  }
  return out;
}

inline void format_ap_report(std::ostream& out, const EvalReport& report) {
  out << "LabelName,AP,NumGT\n";
  for (const auto& [label, ap] : report.ap) out << label << ',' << fixed6(ap) << ',' << report.num_gt.at(label) << '\n';
}

inline void write_ap_report(const EvalReport& report, const std::filesystem::path& path) {
  atomic_write(path, [&](std::ostream& out) { format_ap_report(out, report); });
}

inline ThresholdTable read_thresholds(const std::filesystem::path& path, double default_threshold) {
  auto r = CsvReader::from_file(path);
  r.expect_header({"LabelName", "Threshold"});
  ThresholdTable t(default_threshold);
  std::vector<std::string> f;
  while (r.next(f)) {
    detail::check_width(r, f, 2);
    const double h = r.number(f[1], "Threshold");
    if (!(h > 0.0 && h < 1.0)) throw r.error("threshold outside (0,1)");
    t.set(f[0], h);
  }
  return t;
}

inline void write_thresholds(const ThresholdTable& t, const std::filesystem::path& path) {
  atomic_write(path, [&](std::ostream& out) {
    out << "LabelName,Threshold\n";
    for (const auto& [label, h] : t.entries()) out << label << ',' << fixed6(h) << '\n';
  });
}

inline std::vector<BBox> read_boxes(const std::filesystem::path& path) {
  auto r = CsvReader::from_file(path);
  r.expect_header({"XMin", "YMin", "XMax", "YMax"});
  std::vector<BBox> out;
  std::vector<std::string> f;
  while (r.next(f)) {
    detail::check_width(r, f, 4);
    out.push_back(detail::parse_box(r, f, 0, CoordOrder::xy));
  }
  return out;
}

inline void write_boxes(const std::vector<BBox>& boxes, const std::filesystem::path& path) {
  atomic_write(path, [&](std::ostream& out) {
    out << "XMin,YMin,XMax,YMax\n";
    for (const auto& b : boxes) {
      detail::write_box(out, b);
      out << '\n';
    }
  });
}

// ImageID,LabelName,XMin,YMin,XMax,YMax,ClassifierScore
inline std::map<ClassifierKey, double> read_classifier_scores(const std::filesystem::path& path) {
  auto r = CsvReader::from_file(path);
  r.expect_header({"ImageID", "LabelName", "XMin", "YMin", "XMax", "YMax", "ClassifierScore"});
  std::map<ClassifierKey, double> out;
  std::vector<std::string> f;
  while (r.next(f)) {
    detail::check_width(r, f, 7);
    const BBox b = detail::parse_box(r, f, 2, CoordOrder::xy);
    const double s = r.number(f[6], "ClassifierScore");
    if (!(s >= 0.0 && s <= 1.0)) throw r.error("classifier score outside [0,1]");
    out[classifier_key(f[0], f[1], b)] = s;
  }
  return out;
}

}  // namespace detkit::io
