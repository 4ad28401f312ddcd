#pragma once

// Rotated-quadrilateral geometry: areas, polygon IoU, rotated NMS, anchor
// generation, corner-offset encode/decode and mask rasterization.
//
// Coordinate convention: image pixels, x right, y down. QuadBox corners are
// stored clockwise as seen on screen, which makes the raw shoelace sum
// positive under this axis convention.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace rfn {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

inline Point operator+(Point a, Point b) { return {a.x + b.x, a.y + b.y}; }
inline Point operator-(Point a, Point b) { return {a.x - b.x, a.y - b.y}; }
inline Point operator*(double s, Point p) { return {s * p.x, s * p.y}; }
inline double cross(Point a, Point b) { return a.x * b.y - a.y * b.x; }

// Four corners, clockwise on screen (y-down).
struct QuadBox {
  std::array<Point, 4> corners{};

  Point& operator[](int i) { return corners[static_cast<size_t>(i)]; }
  const Point& operator[](int i) const { return corners[static_cast<size_t>(i)]; }

  static QuadBox rect(double x0, double y0, double x1, double y1) {
    return QuadBox{{Point{x0, y0}, Point{x1, y0}, Point{x1, y1}, Point{x0, y1}}};
  }

  bool finite() const {
    for (const auto& p : corners)
      if (!std::isfinite(p.x) || !std::isfinite(p.y)) return false;
    return true;
  }

  double min_x() const {
    return std::min(std::min(corners[0].x, corners[1].x), std::min(corners[2].x, corners[3].x));
  }
  double max_x() const {
    return std::max(std::max(corners[0].x, corners[1].x), std::max(corners[2].x, corners[3].x));
  }
  double min_y() const {
    return std::min(std::min(corners[0].y, corners[1].y), std::min(corners[2].y, corners[3].y));
  }
  double max_y() const {
    return std::max(std::max(corners[0].y, corners[1].y), std::max(corners[2].y, corners[3].y));
  }
  // Axis-aligned extents; the normalizers for offset encoding.
  double width() const { return max_x() - min_x(); }
  double height() const { return max_y() - min_y(); }

  QuadBox scaled(double s) const {
    QuadBox q = *this;
    for (auto& p : q.corners) {
      p.x *= s;
      p.y *= s;
    }
    return q;
  }
};

// Raw shoelace sum / 2. Positive for screen-clockwise corners (y-down).
inline double quad_signed_area(const QuadBox& q) {
  double s = 0.0;
  for (int i = 0; i < 4; ++i) {
    const Point& a = q[i];
    const Point& b = q[(i + 1) % 4];
    s += a.x * b.y - b.x * a.y;
  }
  return 0.5 * s;
}

inline bool quad_is_clockwise(const QuadBox& q) { return quad_signed_area(q) > 0.0; }

inline double quad_area(const QuadBox& q) {
  if (!q.finite()) throw std::invalid_argument("quad_area: non-finite corner");
  return std::abs(quad_signed_area(q));
}

inline bool quad_is_convex(const QuadBox& q) {
  // All consecutive edge cross products share a sign (zeros allowed,
  // but not all-zero).
  int pos = 0, neg = 0;
  for (int i = 0; i < 4; ++i) {
    Point e1 = q[(i + 1) % 4] - q[i];
    Point e2 = q[(i + 2) % 4] - q[(i + 1) % 4];
    double c = cross(e1, e2);
    if (c > 0) ++pos;
    if (c < 0) ++neg;
  }
  return !(pos > 0 && neg > 0) && (pos + neg) > 0;
}

namespace detail {

inline std::vector<Point> as_clockwise_polygon(const QuadBox& q) {
  std::vector<Point> poly(q.corners.begin(), q.corners.end());
  if (quad_signed_area(q) < 0.0) std::reverse(poly.begin(), poly.end());
  return poly;
}

// Sutherland-Hodgman: clip a convex polygon by the half-plane on the
// clockwise side of edge a->b.
inline std::vector<Point> clip_by_edge(const std::vector<Point>& poly, Point a, Point b) {
  std::vector<Point> out;
  out.reserve(poly.size() + 2);
  const size_t n = poly.size();
  auto side = [&](Point p) { return cross(b - a, p - a); };
  for (size_t i = 0; i < n; ++i) {
    Point cur = poly[i];
    Point nxt = poly[(i + 1) % n];
    double sc = side(cur);
    double sn = side(nxt);
    if (sc >= 0) out.push_back(cur);
    if ((sc > 0 && sn < 0) || (sc < 0 && sn > 0)) {
      double t = sc / (sc - sn);
      out.push_back(cur + t * (nxt - cur));
    }
  }
  return out;
}

inline double polygon_area(const std::vector<Point>& poly) {
  if (poly.size() < 3) return 0.0;
  double s = 0.0;
  for (size_t i = 0; i < poly.size(); ++i) {
    const Point& a = poly[i];
    const Point& b = poly[(i + 1) % poly.size()];
    s += a.x * b.y - b.x * a.y;
  }
  return std::abs(0.5 * s);
}

}  // namespace detail

// Area of the intersection of two convex quads (Sutherland-Hodgman clipping).
inline double quad_intersection_area(const QuadBox& a, const QuadBox& b) {
  if (a.max_x() <= b.min_x() || b.max_x() <= a.min_x() || a.max_y() <= b.min_y() ||
      b.max_y() <= a.min_y())
    return 0.0;
  std::vector<Point> poly = detail::as_clockwise_polygon(a);
  std::vector<Point> clip = detail::as_clockwise_polygon(b);
  for (size_t i = 0; i < clip.size() && !poly.empty(); ++i) {
    poly = detail::clip_by_edge(poly, clip[i], clip[(i + 1) % clip.size()]);
  }
  return detail::polygon_area(poly);
}

// IoU of two convex quads. Zero-area union yields 0.
inline double quad_iou(const QuadBox& a, const QuadBox& b) {
  if (!a.finite() || !b.finite()) throw std::invalid_argument("quad_iou: non-finite corner");
  double inter = quad_intersection_area(a, b);
  double uni = quad_area(a) + quad_area(b) - inter;
  if (uni <= 0.0) return 0.0;
  double iou = inter / uni;
  return std::clamp(iou, 0.0, 1.0);
}

// Greedy descending-score suppression. Ties broken by lower original index;
// returned indices are in descending-score order.
inline std::vector<int> rotated_nms(const std::vector<std::pair<QuadBox, double>>& dets,
                                    double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0))
    throw std::invalid_argument("rotated_nms: iou_threshold must be in (0,1)");
  for (const auto& d : dets)
    if (!std::isfinite(d.second)) throw std::invalid_argument("rotated_nms: non-finite score");

  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int i, int j) {
    return dets[static_cast<size_t>(i)].second > dets[static_cast<size_t>(j)].second;
  });

  std::vector<int> kept;
  std::vector<char> suppressed(dets.size(), 0);
  for (size_t oi = 0; oi < order.size(); ++oi) {
    int i = order[oi];
    if (suppressed[static_cast<size_t>(i)]) continue;
    kept.push_back(i);
    for (size_t oj = oi + 1; oj < order.size(); ++oj) {
      int j = order[oj];
      if (suppressed[static_cast<size_t>(j)]) continue;
      if (quad_iou(dets[static_cast<size_t>(i)].first, dets[static_cast<size_t>(j)].first) >
          iou_threshold)
        suppressed[static_cast<size_t>(j)] = 1;
    }
  }
  return kept;
}

// Axis-aligned default boxes for one pyramid level. Eight aspect-ratio
// variants per grid point; every box has area scale^2 (width scale*sqrt(r),
// height scale/sqrt(r)); centers sit at ((x+0.5)*stride, (y+0.5)*stride).
struct AnchorGrid {
  int level_index = 0;  // 1..4
  double stride = 0.0;
  double scale = 0.0;
  int height = 0;  // h_i grid points
  int width = 0;   // w_i grid points
  std::vector<double> ratios;
  std::vector<QuadBox> boxes;  // row-major (y, x, ratio)

  int num_anchors() const { return height * width * static_cast<int>(ratios.size()); }
  int index_of(int y, int x, int r) const {
    return (y * width + x) * static_cast<int>(ratios.size()) + r;
  }
  const QuadBox& box(int y, int x, int r) const {
    return boxes[static_cast<size_t>(index_of(y, x, r))];
  }
};

inline const std::vector<double>& default_anchor_ratios() {
  static const std::vector<double> r{1.0, 2.0, 3.0, 5.0, 7.5, 1.0 / 2.0, 1.0 / 4.0, 1.0 / 6.0};
  return r;
}

inline AnchorGrid generate_anchors(int level_h, int level_w, double stride, double scale,
                                   const std::vector<double>& ratios = default_anchor_ratios()) {
  if (level_h < 1 || level_w < 1)
    throw std::invalid_argument("generate_anchors: level shape must be >= 1");
  if (!(stride > 0.0) || !(scale > 0.0))
    throw std::invalid_argument("generate_anchors: stride and scale must be positive");
  for (double r : ratios)
    if (!(r > 0.0)) throw std::invalid_argument("generate_anchors: ratios must be positive");

  AnchorGrid g;
  g.stride = stride;
  g.scale = scale;
  g.height = level_h;
  g.width = level_w;
  g.ratios = ratios;
  g.boxes.reserve(static_cast<size_t>(level_h) * static_cast<size_t>(level_w) * ratios.size());
  for (int y = 0; y < level_h; ++y) {
    for (int x = 0; x < level_w; ++x) {
      double cx = (x + 0.5) * stride;
      double cy = (y + 0.5) * stride;
      for (double r : ratios) {
        double w = scale * std::sqrt(r);
        double h = scale / std::sqrt(r);
        g.boxes.push_back(QuadBox::rect(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h));
      }
    }
  }
  return g;
}

// Per-corner offsets normalized by the anchor's axis-aligned extents:
// offsets[2k] = dx_k / anchor_width, offsets[2k+1] = dy_k / anchor_height.
using Offsets8 = std::array<double, 8>;

inline Offsets8 encode_offsets(const QuadBox& anchor, const QuadBox& gt) {
  double w = anchor.width();
  double h = anchor.height();
  if (!(w > 0.0) || !(h > 0.0))
    throw std::invalid_argument("encode_offsets: degenerate anchor (zero width/height)");
  Offsets8 off{};
  for (int k = 0; k < 4; ++k) {
    off[static_cast<size_t>(2 * k)] = (gt[k].x - anchor[k].x) / w;
    off[static_cast<size_t>(2 * k + 1)] = (gt[k].y - anchor[k].y) / h;
  }
  return off;
}

inline QuadBox decode_offsets(const QuadBox& anchor, const Offsets8& offsets) {
  double w = anchor.width();
  double h = anchor.height();
  if (!(w > 0.0) || !(h > 0.0))
    throw std::invalid_argument("decode_offsets: degenerate anchor (zero width/height)");
  QuadBox q;
  for (int k = 0; k < 4; ++k) {
    q[k].x = anchor[k].x + offsets[static_cast<size_t>(2 * k)] * w;
    q[k].y = anchor[k].y + offsets[static_cast<size_t>(2 * k + 1)] * h;
  }
  return q;
}

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> values;  // row-major, exactly 0 or 1

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), values(static_cast<size_t>(h) * w, 0) {}

  uint8_t& at(int y, int x) { return values[static_cast<size_t>(y) * width + x]; }
  uint8_t at(int y, int x) const { return values[static_cast<size_t>(y) * width + x]; }

  size_t count_ones() const {
    return static_cast<size_t>(std::count(values.begin(), values.end(), uint8_t(1)));
  }
};

// Point-in-quad with inclusive boundary. Orientation-normalized internally.
inline bool point_in_quad(const QuadBox& q, Point p, double eps = 1e-9) {
  double orient = quad_signed_area(q) >= 0.0 ? 1.0 : -1.0;
  for (int i = 0; i < 4; ++i) {
    Point a = q[i];
    Point b = q[(i + 1) % 4];
    if (orient * cross(b - a, p - a) < -eps) return false;
  }
  return true;
}

// Pixel = 1 iff its center (x+0.5, y+0.5) lies inside or on the boundary of
// any quad; union semantics over the list.
inline BinaryMask rasterize_mask(const std::vector<QuadBox>& quads, int height, int width) {
  if (height < 1 || width < 1) throw std::invalid_argument("rasterize_mask: dims must be >= 1");
  BinaryMask m(height, width);
  for (const auto& q : quads) {
    int x0 = std::max(0, static_cast<int>(std::floor(q.min_x() - 0.5)));
    int x1 = std::min(width - 1, static_cast<int>(std::ceil(q.max_x())));
    int y0 = std::max(0, static_cast<int>(std::floor(q.min_y() - 0.5)));
    int y1 = std::min(height - 1, static_cast<int>(std::ceil(q.max_y())));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (!m.at(y, x) && point_in_quad(q, Point{x + 0.5, y + 0.5})) m.at(y, x) = 1;
  }
  return m;
}

}  // namespace rfn
