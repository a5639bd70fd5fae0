#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "cwat/error.hpp"

namespace cwat {

/// Corner-form box in pixels.
struct Box {
  double xmin = 0, ymin = 0, xmax = 0, ymax = 0;

  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool valid() const { return xmin < xmax && ymin < ymax; }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Center-form box (cx, cy, w, h) in pixels. Anchors use this form.
struct CenterBox {
  double cx = 0, cy = 0, w = 0, h = 0;

  friend bool operator==(const CenterBox&, const CenterBox&) = default;
};

inline Box to_corners(const CenterBox& c) {
  return {c.cx - c.w / 2, c.cy - c.h / 2, c.cx + c.w / 2, c.cy + c.h / 2};
}

inline CenterBox to_center(const Box& b) {
  return {(b.xmin + b.xmax) / 2, (b.ymin + b.ymax) / 2, b.width(), b.height()};
}

/// Intersection over union; 0 for disjoint or zero-area boxes.
inline double iou(const Box& a, const Box& b) {
  const double ua = a.area();
  const double ub = b.area();
  if (ua <= 0.0 || ub <= 0.0) return 0.0;
  const double iw = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
  const double ih = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (ua + ub - inter);
}

using BoxOffsets = std::array<double, 4>;

/// ((tcx - acx)/aw, (tcy - acy)/ah, ln(tw/aw), ln(th/ah)).
inline BoxOffsets encode_box(const CenterBox& anchor, const CenterBox& truth) {
  if (!(truth.w > 0.0) || !(truth.h > 0.0)) {
    fail(ErrorCategory::data, "cannot encode a box with nonpositive width or height");
  }
  if (!(anchor.w > 0.0) || !(anchor.h > 0.0)) {
    fail(ErrorCategory::data, "anchor has nonpositive width or height");
  }
  return {(truth.cx - anchor.cx) / anchor.w, (truth.cy - anchor.cy) / anchor.h,
          std::log(truth.w / anchor.w), std::log(truth.h / anchor.h)};
}

/// Inverse of encode_box without clipping.
inline CenterBox decode_box_unclipped(const CenterBox& anchor, const BoxOffsets& t) {
  return {anchor.cx + t[0] * anchor.w, anchor.cy + t[1] * anchor.h,
          anchor.w * std::exp(t[2]), anchor.h * std::exp(t[3])};
}

inline Box clip_box(Box b, double image_size) {
  b.xmin = std::clamp(b.xmin, 0.0, image_size);
  b.ymin = std::clamp(b.ymin, 0.0, image_size);
  b.xmax = std::clamp(b.xmax, 0.0, image_size);
  b.ymax = std::clamp(b.ymax, 0.0, image_size);
  return b;
}

/// Inverse of encode_box, clipped to [0, image_size]^2. Boxes already inside
/// the image come back unchanged.
inline CenterBox decode_box(const CenterBox& anchor, const BoxOffsets& t, double image_size) {
  const CenterBox raw = decode_box_unclipped(anchor, t);
  const Box corners = to_corners(raw);
  if (corners.xmin >= 0 && corners.ymin >= 0 && corners.xmax <= image_size &&
      corners.ymax <= image_size) {
    return raw;
  }
  return to_center(clip_box(corners, image_size));
}

}  // namespace cwat
