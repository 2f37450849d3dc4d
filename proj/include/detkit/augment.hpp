#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "detkit/boxes.hpp"
#include "detkit/error.hpp"
#include "detkit/rng.hpp"

namespace detkit {

// 8-bit RGB raster, row-major, interleaved channels.
struct RasterImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  RasterImage() = default;
  RasterImage(int w, int h, std::uint8_t fill = 0) : width(w), height(h) {
    if (w < 1 || h < 1) throw data_error("image dimensions must be >= 1");
    pixels.assign(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3, fill);
  }

  std::size_t offset(int x, int y) const {
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * 3;
  }
  std::uint8_t* at(int x, int y) { return pixels.data() + offset(x, y); }
  const std::uint8_t* at(int x, int y) const { return pixels.data() + offset(x, y); }

  friend bool operator==(const RasterImage&, const RasterImage&) = default;
};

inline constexpr std::uint8_t kFillGray = 128;

// Binary portable pixmap (P6, maxval 255).
inline RasterImage read_ppm(std::istream& in) {
  auto token = [&in]() {
    std::string t;
    while (true) {
      int c = in.peek();
      if (c == EOF) break;
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    while (in.peek() != EOF && !std::isspace(in.peek()) && in.peek() != '#') t.push_back(static_cast<char>(in.get()));
    return t;
  };
  if (token() != "P6") throw data_error("not a binary PPM (P6) image");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw data_error("malformed PPM header");
  }
  if (maxval != 255) throw data_error("PPM maxval must be 255");
  if (w < 1 || h < 1) throw data_error("PPM dimensions must be >= 1");
  in.get();  // single whitespace before raster
  RasterImage img(w, h);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw data_error("truncated PPM raster");
  return img;
}

inline void write_ppm(std::ostream& out, const RasterImage& img) {
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

enum class AugKind {
  TranslateX_BBox,
  TranslateY_Only_BBoxes,
  Equalize,
  Cutout,
  Sharpness,
  ShearX_BBox,
  ShearY_BBox,
  Rotate_BBox,
  Color,
};

inline constexpr std::array<std::pair<AugKind, const char*>, 9> kAugKindNames = {{
    {AugKind::TranslateX_BBox, "TranslateX_BBox"},
    {AugKind::TranslateY_Only_BBoxes, "TranslateY_Only_BBoxes"},
    {AugKind::Equalize, "Equalize"},
    {AugKind::Cutout, "Cutout"},
    {AugKind::Sharpness, "Sharpness"},
    {AugKind::ShearX_BBox, "ShearX_BBox"},
    {AugKind::ShearY_BBox, "ShearY_BBox"},
    {AugKind::Rotate_BBox, "Rotate_BBox"},
    {AugKind::Color, "Color"},
}};

inline std::string to_string(AugKind k) {
  for (const auto& [kind, name] : kAugKindNames) {
    if (kind == k) return name;
  }
  return "?";
}

inline AugKind aug_kind_from_string(const std::string& s) {
  for (const auto& [kind, name] : kAugKindNames) {
    if (s == name) return kind;
  }
  throw data_error("unknown augmentation kind: " + s);
}

// Ops that move pixels and boxes together through one affine map.
inline bool is_geometric(AugKind k) {
  return k == AugKind::TranslateX_BBox || k == AugKind::ShearX_BBox || k == AugKind::ShearY_BBox ||
         k == AugKind::Rotate_BBox;
}

struct AugOp {
  AugKind kind = AugKind::Equalize;
  double probability = 0.0;
  int magnitude = 0;

  friend bool operator==(const AugOp&, const AugOp&) = default;
};

inline void validate(const AugOp& op) {
  if (!(op.probability >= 0.0 && op.probability <= 1.0))
    throw data_error("augmentation probability outside [0,1] for " + to_string(op.kind));
  if (op.magnitude < 0 || op.magnitude > 10)
    throw data_error("augmentation magnitude outside [0,10] for " + to_string(op.kind));
}

using SubPolicy = std::array<AugOp, 2>;

struct Policy {
  std::vector<SubPolicy> sub_policies;
};

// The five detection sub-policies, each an ordered pair of (op, P, M).
inline Policy default_policy() {
  using K = AugKind;
  return {{
      {{{K::TranslateX_BBox, 0.6, 4}, {K::Equalize, 0.8, 10}}},
      {{{K::TranslateY_Only_BBoxes, 0.2, 2}, {K::Cutout, 0.8, 8}}},
      {{{K::Sharpness, 0.0, 8}, {K::ShearX_BBox, 0.4, 0}}},
      {{{K::ShearY_BBox, 1.0, 2}, {K::TranslateY_Only_BBoxes, 0.6, 6}}},
      {{{K::Rotate_BBox, 0.6, 10}, {K::Color, 1.0, 6}}},
  }};
}

inline Policy policy_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.empty()) throw data_error("policy must be a non-empty array of sub-policies");
  Policy p;
  for (const auto& sp : j) {
    if (!sp.is_object() || !sp.contains("ops") || !sp["ops"].is_array() || sp["ops"].size() != 2)
      throw data_error("each sub-policy needs exactly two \"ops\"");
    SubPolicy sub;
    for (std::size_t i = 0; i < 2; ++i) {
      const auto& o = sp["ops"][i];
      if (!o.is_object() || !o.contains("kind") || !o.contains("p") || !o.contains("m"))
        throw data_error("augmentation op needs \"kind\", \"p\" and \"m\"");
      if (!o["m"].is_number_integer()) throw data_error("augmentation magnitude must be an integer");
      sub[i] = {aug_kind_from_string(o["kind"].get<std::string>()), o["p"].get<double>(), o["m"].get<int>()};
      validate(sub[i]);
    }
    p.sub_policies.push_back(sub);
  }
  return p;
}

inline nlohmann::json policy_to_json(const Policy& p) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& sp : p.sub_policies) {
    nlohmann::json ops = nlohmann::json::array();
    for (const auto& o : sp) ops.push_back({{"kind", to_string(o.kind)}, {"p", o.probability}, {"m", o.magnitude}});
    arr.push_back({{"ops", ops}});
  }
  return arr;
}

// Linear magnitude mapping, M in [0,10], M = 0 is the no-op end:
//   translate: 0..0.3 of the image dimension
//   shear:     0..0.3 shear factor
//   rotate:    0..30 degrees
//   cutout:    0..0.5 of the shorter image side (square side)
//   sharpness, color: enhancement factor 1 +/- 0..0.9 (this returns 1 + 0.9*M/10)
//   equalize:  ignores M
inline double magnitude_to_param(AugKind kind, int m) {
  if (m < 0 || m > 10) throw data_error("augmentation magnitude outside [0,10]: " + std::to_string(m));
  const double frac = m / 10.0;
  switch (kind) {
    case AugKind::TranslateX_BBox:
    case AugKind::TranslateY_Only_BBoxes:
    case AugKind::ShearX_BBox:
    case AugKind::ShearY_BBox:
      return 0.3 * frac;
    case AugKind::Rotate_BBox:
      return 30.0 * frac;
    case AugKind::Cutout:
      return 0.5 * frac;
    case AugKind::Sharpness:
    case AugKind::Color:
      return 1.0 + 0.9 * frac;
    case AugKind::Equalize:
      return 0.0;
  }
  return 0.0;
}

// Forward map (x, y) -> (a*x + b*y + c, d*x + e*y + f) in pixel coordinates.
struct Affine {
  double a = 1, b = 0, c = 0;
  double d = 0, e = 1, f = 0;

  std::array<double, 2> apply(double x, double y) const { return {a * x + b * y + c, d * x + e * y + f}; }

  Affine inverse() const {
    const double det = a * e - b * d;
    Affine inv;
    inv.a = e / det;
    inv.b = -b / det;
    inv.d = -d / det;
    inv.e = a / det;
    inv.c = -(inv.a * c + inv.b * f);
    inv.f = -(inv.d * c + inv.e * f);
    return inv;
  }
};

// `param` is signed: translate fraction, shear factor, or rotation degrees.
inline Affine geometric_affine(AugKind kind, double param, int width, int height) {
  Affine m;
  switch (kind) {
    case AugKind::TranslateX_BBox:
      m.c = param * width;
      break;
    case AugKind::ShearX_BBox:
      m.b = param;
      break;
    case AugKind::ShearY_BBox:
      m.d = param;
      break;
    case AugKind::Rotate_BBox: {
      const double th = param * std::numbers::pi / 180.0;
      const double cs = std::cos(th), sn = std::sin(th);
      const double cx = width / 2.0, cy = height / 2.0;
      m.a = cs;
      m.b = sn;
      m.d = -sn;
      m.e = cs;
      m.c = cx - cs * cx - sn * cy;
      m.f = cy + sn * cx - cs * cy;
      break;
    }
    default:
      throw usage_error("not a geometric augmentation: " + to_string(kind));
  }
  return m;
}

// Maps each box's corners, re-bounds, clips, and drops boxes left empty.
inline std::vector<BBox> transform_boxes(std::span<const BBox> boxes, const Affine& m, int width, int height) {
  std::vector<BBox> out;
  for (const auto& b : boxes) {
    const double xs[2] = {b.x_min * width, b.x_max * width};
    const double ys[2] = {b.y_min * height, b.y_max * height};
    double lo_x = INFINITY, lo_y = INFINITY, hi_x = -INFINITY, hi_y = -INFINITY;
    for (double x : xs) {
      for (double y : ys) {
        const auto [u, v] = m.apply(x, y);
        lo_x = std::min(lo_x, u);
        hi_x = std::max(hi_x, u);
        lo_y = std::min(lo_y, v);
        hi_y = std::max(hi_y, v);
      }
    }
    if (auto c = clip_box({lo_x / width, lo_y / height, hi_x / width, hi_y / height})) out.push_back(*c);
  }
  return out;
}

// Inverse-maps each output pixel center and samples the nearest source pixel.
inline RasterImage warp_image(const RasterImage& src, const Affine& m) {
  const Affine inv = m.inverse();
  RasterImage out(src.width, src.height, kFillGray);
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      const auto [sx, sy] = inv.apply(x + 0.5, y + 0.5);
      const double fx = std::floor(sx), fy = std::floor(sy);
      if (fx < 0 || fy < 0 || fx >= src.width || fy >= src.height) continue;
      const auto* p = src.at(static_cast<int>(fx), static_cast<int>(fy));
      std::copy(p, p + 3, out.at(x, y));
    }
  }
  return out;
}

namespace detail {

struct PixelRect {
  int x0, y0, x1, y1;  // half-open
};

inline PixelRect pixel_rect(const BBox& b, int width, int height) {
  return {std::clamp(static_cast<int>(std::floor(b.x_min * width)), 0, width),
          std::clamp(static_cast<int>(std::floor(b.y_min * height)), 0, height),
          std::clamp(static_cast<int>(std::ceil(b.x_max * width)), 0, width),
          std::clamp(static_cast<int>(std::ceil(b.y_max * height)), 0, height)};
}

inline std::uint8_t round_u8(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0))); }

// out = degenerate + factor * (img - degenerate)
inline RasterImage blend(const RasterImage& degenerate, const RasterImage& img, double factor) {
  RasterImage out = img;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const double d = degenerate.pixels[i];
    out.pixels[i] = round_u8(d + factor * (img.pixels[i] - d));
  }
  return out;
}

}  // namespace detail

// Shifts pixel content vertically inside each box by dy pixels; box
// coordinates are untouched. Vacated pixels take the fill color.
inline RasterImage translate_y_inside_boxes(const RasterImage& src, std::span<const BBox> boxes, int dy) {
  RasterImage out = src;
  for (const auto& b : boxes) {
    const auto r = detail::pixel_rect(b, src.width, src.height);
    for (int y = r.y0; y < r.y1; ++y) {
      const int sy = y - dy;
      for (int x = r.x0; x < r.x1; ++x) {
        auto* dst = out.at(x, y);
        if (sy < r.y0 || sy >= r.y1) {
          std::fill(dst, dst + 3, kFillGray);
        } else {
          const auto* p = src.at(x, sy);
          std::copy(p, p + 3, dst);
        }
      }
    }
  }
  return out;
}

// Per-channel histogram equalization.
inline RasterImage equalize(const RasterImage& src) {
  RasterImage out = src;
  for (int ch = 0; ch < 3; ++ch) {
    std::array<std::int64_t, 256> hist{};
    for (std::size_t i = ch; i < src.pixels.size(); i += 3) ++hist[src.pixels[i]];
    std::int64_t last = 0;
    for (int v = 255; v >= 0; --v) {
      if (hist[v] != 0) {
        last = hist[v];
        break;
      }
    }
    std::int64_t total = 0;
    for (auto c : hist) total += c;
    const std::int64_t step = (total - last) / 255;
    if (step == 0) continue;
    std::array<std::uint8_t, 256> lut{};
    std::int64_t n = step / 2;
    for (int v = 0; v < 256; ++v) {
      lut[v] = static_cast<std::uint8_t>(std::min<std::int64_t>(n / step, 255));
      n += hist[v];
    }
    for (std::size_t i = ch; i < out.pixels.size(); i += 3) out.pixels[i] = lut[src.pixels[i]];
  }
  return out;
}

// Square of side `side` pixels centred on (cx, cy), clipped to the image.
inline RasterImage cutout(const RasterImage& src, int cx, int cy, int side) {
  RasterImage out = src;
  if (side <= 0) return out;
  const int x0 = std::max(0, cx - side / 2), y0 = std::max(0, cy - side / 2);
  const int x1 = std::min(src.width, cx - side / 2 + side), y1 = std::min(src.height, cy - side / 2 + side);
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) std::fill(out.at(x, y), out.at(x, y) + 3, kFillGray);
  }
  return out;
}

// Blend toward a 3x3 smoothed copy (kernel 1 1 1 / 1 5 1 / 1 1 1, border kept).
inline RasterImage sharpness(const RasterImage& src, double factor) {
  RasterImage smooth = src;
  for (int y = 1; y + 1 < src.height; ++y) {
    for (int x = 1; x + 1 < src.width; ++x) {
      for (int ch = 0; ch < 3; ++ch) {
        int acc = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) acc += src.at(x + dx, y + dy)[ch] * ((dx == 0 && dy == 0) ? 5 : 1);
        }
        smooth.at(x, y)[ch] = detail::round_u8(acc / 13.0);
      }
    }
  }
  return detail::blend(smooth, src, factor);
}

// Blend toward the luma image.
inline RasterImage color(const RasterImage& src, double factor) {
  RasterImage gray = src;
  for (std::size_t i = 0; i < src.pixels.size(); i += 3) {
    const int l = (src.pixels[i] * 299 + src.pixels[i + 1] * 587 + src.pixels[i + 2] * 114 + 500) / 1000;
    gray.pixels[i] = gray.pixels[i + 1] = gray.pixels[i + 2] = static_cast<std::uint8_t>(l);
  }
  return detail::blend(gray, src, factor);
}

// Random quantities of one op application, drawn before any pixel work.
struct DrawnOp {
  AugKind kind = AugKind::Equalize;
  bool fired = false;
  double param = 0.0;  // signed strength; enhancement factor for Sharpness/Color
  int center_x = 0;    // Cutout only
  int center_y = 0;
};

inline DrawnOp draw_op(const AugOp& op, int width, int height, Rng& rng) {
  validate(op);
  DrawnOp d{op.kind, rng.bernoulli(op.probability), magnitude_to_param(op.kind, op.magnitude), 0, 0};
  if (!d.fired) return d;
  switch (op.kind) {
    case AugKind::Sharpness:
    case AugKind::Color:
      d.param = 1.0 + rng.sign() * (d.param - 1.0);
      break;
    case AugKind::Cutout:
      d.center_x = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(width)));
      d.center_y = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(height)));
      break;
    case AugKind::Equalize:
      break;
    default:
      d.param *= rng.sign();
      break;
  }
  return d;
}

struct AugmentResult {
  RasterImage image;
  std::vector<BBox> boxes;
};

inline AugmentResult apply_drawn(const RasterImage& img, std::span<const BBox> boxes, const DrawnOp& d) {
  AugmentResult r{img, {boxes.begin(), boxes.end()}};
  if (!d.fired) return r;
  if (is_geometric(d.kind)) {
    const Affine m = geometric_affine(d.kind, d.param, img.width, img.height);
    r.image = warp_image(img, m);
    r.boxes = transform_boxes(boxes, m, img.width, img.height);
    return r;
  }
  switch (d.kind) {
    case AugKind::TranslateY_Only_BBoxes:
      r.image = translate_y_inside_boxes(img, boxes, static_cast<int>(std::lround(d.param * img.height)));
      break;
    case AugKind::Equalize:
      r.image = equalize(img);
      break;
    case AugKind::Cutout: {
      const int side = static_cast<int>(std::lround(d.param * std::min(img.width, img.height)));
      r.image = cutout(img, d.center_x, d.center_y, side);
      break;
    }
    case AugKind::Sharpness:
      r.image = sharpness(img, d.param);
      break;
    case AugKind::Color:
      r.image = color(img, d.param);
      break;
    default:
      break;
  }
  return r;
}

inline AugmentResult apply_op(const RasterImage& img, std::span<const BBox> boxes, const AugOp& op, Rng& rng) {
  return apply_drawn(img, boxes, draw_op(op, img.width, img.height, rng));
}

inline std::size_t choose_sub_policy(const Policy& policy, Rng& rng) {
  if (policy.sub_policies.empty()) throw data_error("policy has no sub-policies");
  return static_cast<std::size_t>(rng.uniform_index(policy.sub_policies.size()));
}

// One uniformly chosen sub-policy; its two ops run in order.
inline AugmentResult apply_policy(const RasterImage& img, std::span<const BBox> boxes, const Policy& policy,
                                  Rng& rng) {
  const auto& sub = policy.sub_policies[choose_sub_policy(policy, rng)];
  auto first = apply_op(img, boxes, sub[0], rng);
  return apply_op(first.image, first.boxes, sub[1], rng);
}

}  // namespace detkit
