#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pointperc/errors.hpp"

namespace pointperc {

// Image-pixel coordinates: +x right, +y down.
struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend constexpr Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
  friend constexpr Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
  friend constexpr Point2 operator*(double s, Point2 a) { return {s * a.x, s * a.y}; }
  friend constexpr bool operator==(Point2 a, Point2 b) = default;
};

inline constexpr double dot(Point2 a, Point2 b) { return a.x * b.x + a.y * b.y; }
inline constexpr double cross(Point2 a, Point2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Point2 a) { return std::hypot(a.x, a.y); }
inline bool is_finite(Point2 p) { return std::isfinite(p.x) && std::isfinite(p.y); }

// Ordered points; `cyclic` marks a closed contour whose neighbor indices wrap.
struct PointSequence {
  std::vector<Point2> points;
  bool cyclic = false;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  const Point2& operator[](std::size_t i) const { return points[i]; }
  Point2& operator[](std::size_t i) { return points[i]; }

  friend bool operator==(const PointSequence&, const PointSequence&) = default;
};

inline PointSequence make_closed(std::vector<Point2> pts) { return {std::move(pts), true}; }
inline PointSequence make_open(std::vector<Point2> pts) { return {std::move(pts), false}; }

// Unsigned angle in [0, pi].
struct Angle {
  double radians = 0.0;
};

// Axis-aligned box, top-left corner plus size.
struct BBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  Point2 center() const { return {x + w / 2.0, y + h / 2.0}; }
  friend bool operator==(const BBox&, const BBox&) = default;
};

inline constexpr double kDegenerateRayEps = 1e-12;

inline void validate_finite(const PointSequence& seq) {
  for (std::size_t i = 0; i < seq.size(); ++i) {
    detail::require(is_finite(seq[i]), "non-finite point at index " + std::to_string(i));
  }
}

// Indices of the n-hop neighbours of vertex i, or nullopt when they do not
// exist (open chain ends, or hops that would wrap onto each other).
inline std::optional<std::pair<std::size_t, std::size_t>> hop_neighbors(std::size_t size,
                                                                         bool cyclic,
                                                                         std::size_t i,
                                                                         std::size_t n) {
  if (n == 0 || i >= size) return std::nullopt;
  if (cyclic) {
    if (n >= size) return std::nullopt;
    return std::pair{(i + size - n) % size, (i + n) % size};
  }
  if (i < n || i + n >= size) return std::nullopt;
  return std::pair{i - n, i + n};
}

// Interior angle at vertex i between rays i->(i-n) and i->(i+n).
// A ray shorter than `eps` counts as straight (pi).
inline Angle hop_angle(const PointSequence& seq, std::size_t i, std::size_t n,
                       double eps = kDegenerateRayEps) {
  detail::require(n >= 1, "hop must be >= 1");
  detail::require(i < seq.size(), "vertex index out of range");
  if (seq.cyclic) {
    detail::require(seq.size() >= 3, "cyclic angle query needs >= 3 points");
    detail::require(n < seq.size(), "hop must be smaller than the cyclic sequence length");
  }
  auto nb = hop_neighbors(seq.size(), seq.cyclic, i, n);
  detail::require(nb.has_value(), "hop neighbours out of range on open sequence");
  const Point2 u = seq[nb->first] - seq[i];
  const Point2 v = seq[nb->second] - seq[i];
  if (norm(u) < eps || norm(v) < eps) return {std::numbers::pi};
  return {std::atan2(std::abs(cross(u, v)), dot(u, v))};
}

inline double perimeter(const PointSequence& seq) {
  double total = 0.0;
  const std::size_t n = seq.size();
  for (std::size_t i = 0; i + 1 < n; ++i) total += norm(seq[i + 1] - seq[i]);
  if (seq.cyclic && n > 1) total += norm(seq[0] - seq[n - 1]);
  return total;
}

// Shoelace area, (1/2) sum(x_i*y_{i+1} - x_{i+1}*y_i). With +y pointing down
// a positive value means the contour runs clockwise on screen.
inline double signed_area(const PointSequence& seq) {
  const std::size_t n = seq.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += cross(seq[i], seq[(i + 1) % n]);
  return 0.5 * acc;
}

inline bool is_clockwise(const PointSequence& seq) { return signed_area(seq) > 0.0; }

// m points at equal arc-length spacing, starting at the first vertex and
// keeping the traversal direction.
inline PointSequence resample_contour(const PointSequence& seq, std::size_t m) {
  detail::require(m >= 3, "resample target must be >= 3");
  detail::require(!seq.empty(), "cannot resample an empty contour");
  validate_finite(seq);
  const std::size_t n = seq.size();

  std::vector<double> cum(n + 1, 0.0);
  for (std::size_t k = 0; k < n; ++k) cum[k + 1] = cum[k] + norm(seq[(k + 1) % n] - seq[k]);
  const double total = cum[n];
  if (!(total > 0.0)) throw ValidationError("zero-perimeter contour");

  PointSequence out;
  out.cyclic = true;
  out.points.reserve(m);
  std::size_t edge = 0;
  for (std::size_t j = 0; j < m; ++j) {
    const double s = total * static_cast<double>(j) / static_cast<double>(m);
    while (edge + 1 < n && cum[edge + 1] <= s) ++edge;
    const double len = cum[edge + 1] - cum[edge];
    const Point2 a = seq[edge];
    const Point2 b = seq[(edge + 1) % n];
    if (len <= 0.0) {
      out.points.push_back(a);
      continue;
    }
    const double t = std::clamp((s - cum[edge]) / len, 0.0, 1.0);
    out.points.push_back({a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)});
  }
  return out;
}

// Index of the leftmost point, ties broken by smallest y.
inline std::size_t leftmost_index(const PointSequence& seq) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < seq.size(); ++i) {
    const Point2 p = seq[i];
    const Point2 q = seq[best];
    if (p.x < q.x || (p.x == q.x && p.y < q.y)) best = i;
  }
  return best;
}

// Clockwise (image coordinates) traversal starting at the leftmost point.
inline PointSequence canonicalize_contour(const PointSequence& seq) {
  detail::require(seq.size() >= 3, "contour needs >= 3 points");
  validate_finite(seq);
  const double area = signed_area(seq);
  if (area == 0.0) throw ValidationError("degenerate contour with zero area");
  PointSequence out = seq;
  out.cyclic = true;
  if (area < 0.0) std::reverse(out.points.begin(), out.points.end());
  std::rotate(out.points.begin(),
              out.points.begin() + static_cast<std::ptrdiff_t>(leftmost_index(out)),
              out.points.end());
  return out;
}

inline BBox bbox_of(const PointSequence& seq) {
  detail::require(!seq.empty(), "bbox of empty sequence");
  double x0 = seq[0].x, x1 = seq[0].x, y0 = seq[0].y, y1 = seq[0].y;
  for (const Point2& p : seq.points) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  return {x0, y0, x1 - x0, y1 - y0};
}

inline double box_iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

// Box as a clockwise 4-gon starting at its top-left corner.
inline PointSequence rect(const BBox& b) {
  return make_closed({{b.x, b.y}, {b.x + b.w, b.y}, {b.x + b.w, b.y + b.h}, {b.x, b.y + b.h}});
}

namespace detail {

inline int orientation(Point2 a, Point2 b, Point2 c) {
  const double v = cross(b - a, c - a);
  return (v > 0.0) - (v < 0.0);
}

inline bool on_segment(Point2 a, Point2 b, Point2 p) {
  return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) && std::min(a.y, b.y) <= p.y &&
         p.y <= std::max(a.y, b.y);
}

inline bool segments_intersect(Point2 p1, Point2 p2, Point2 q1, Point2 q2) {
  const int o1 = orientation(p1, p2, q1);
  const int o2 = orientation(p1, p2, q2);
  const int o3 = orientation(q1, q2, p1);
  const int o4 = orientation(q1, q2, p2);
  if (o1 != o2 && o3 != o4) return true;
  if (o1 == 0 && on_segment(p1, p2, q1)) return true;
  if (o2 == 0 && on_segment(p1, p2, q2)) return true;
  if (o3 == 0 && on_segment(q1, q2, p1)) return true;
  if (o4 == 0 && on_segment(q1, q2, p2)) return true;
  return false;
}

// Drops consecutive duplicate vertices (including a repeated closing vertex).
inline std::vector<Point2> dedupe_ring(const std::vector<Point2>& pts) {
  std::vector<Point2> out;
  out.reserve(pts.size());
  for (const Point2& p : pts) {
    if (out.empty() || !(out.back() == p)) out.push_back(p);
  }
  while (out.size() > 1 && out.front() == out.back()) out.pop_back();
  return out;
}

// Sutherland-Hodgman clip of a convex polygon by a counter-clockwise
// (positive signed area) convex clipper.
inline std::vector<Point2> clip_convex(std::vector<Point2> subject, const std::vector<Point2>& clipper) {
  const std::size_t nc = clipper.size();
  for (std::size_t e = 0; e < nc && !subject.empty(); ++e) {
    const Point2 a = clipper[e];
    const Point2 b = clipper[(e + 1) % nc];
    const Point2 edge = b - a;
    std::vector<Point2> next;
    next.reserve(subject.size() + 2);
    const std::size_t ns = subject.size();
    for (std::size_t i = 0; i < ns; ++i) {
      const Point2 cur = subject[i];
      const Point2 prv = subject[(i + ns - 1) % ns];
      const double sc = cross(edge, cur - a);
      const double sp = cross(edge, prv - a);
      if (sc >= 0.0) {
        if (sp < 0.0) next.push_back(prv + (sp / (sp - sc)) * (cur - prv));
        next.push_back(cur);
      } else if (sp >= 0.0) {
        next.push_back(prv + (sp / (sp - sc)) * (cur - prv));
      }
    }
    subject = std::move(next);
  }
  return subject;
}

inline double ring_area(const std::vector<Point2>& pts) {
  double acc = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) acc += cross(pts[i], pts[(i + 1) % pts.size()]);
  return 0.5 * acc;
}

struct SignedTriangle {
  std::vector<Point2> verts;  // positive orientation
  double sign;
};

// Fan decomposition: the polygon's winding number equals the signed sum of
// the fan triangles' indicator functions.
inline std::vector<SignedTriangle> fan(const std::vector<Point2>& ring) {
  std::vector<SignedTriangle> tris;
  const Point2 o = ring[0];
  for (std::size_t i = 1; i + 1 < ring.size(); ++i) {
    const Point2 a = ring[i];
    const Point2 b = ring[i + 1];
    const double s = cross(a - o, b - o);
    if (s == 0.0) continue;
    if (s > 0.0) {
      tris.push_back({{o, a, b}, 1.0});
    } else {
      tris.push_back({{o, b, a}, -1.0});
    }
  }
  return tris;
}

}  // namespace detail

// True when no two non-adjacent edges touch and adjacent edges only share
// their common vertex.
inline bool is_simple(const PointSequence& seq) {
  const std::vector<Point2> ring = detail::dedupe_ring(seq.points);
  const std::size_t n = ring.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    const Point2 a1 = ring[i];
    const Point2 a2 = ring[(i + 1) % n];
    for (std::size_t j = i + 1; j < n; ++j) {
      const Point2 b1 = ring[j];
      const Point2 b2 = ring[(j + 1) % n];
      const bool adjacent = (j == i + 1) || (i == 0 && j == n - 1);
      if (adjacent) {
        // Shared vertex is fine; folding back along the same line is not.
        const Point2 shared = (j == i + 1) ? a2 : a1;
        const Point2 p = (j == i + 1) ? a1 : a2;
        const Point2 q = (j == i + 1) ? b2 : b1;
        if (detail::orientation(p, shared, q) == 0 && dot(p - shared, q - shared) > 0.0) return false;
        continue;
      }
      if (detail::segments_intersect(a1, a2, b1, b2)) return false;
    }
  }
  return true;
}

// Area of the intersection of two simple polygons (any orientation).
inline double intersection_area(const PointSequence& a, const PointSequence& b) {
  const std::vector<Point2> ra = detail::dedupe_ring(a.points);
  const std::vector<Point2> rb = detail::dedupe_ring(b.points);
  if (ra.size() < 3 || rb.size() < 3) return 0.0;
  const double sa = detail::ring_area(ra) > 0.0 ? 1.0 : -1.0;
  const double sb = detail::ring_area(rb) > 0.0 ? 1.0 : -1.0;
  const auto ta = detail::fan(ra);
  const auto tb = detail::fan(rb);
  double acc = 0.0;
  for (const auto& t : ta) {
    for (const auto& u : tb) {
      const auto piece = detail::clip_convex(t.verts, u.verts);
      if (piece.size() < 3) continue;
      acc += t.sign * u.sign * detail::ring_area(piece);
    }
  }
  return std::max(0.0, sa * sb * acc);
}

// Intersection over union of two simple polygons via exact clipping.
inline double polygon_iou(const PointSequence& a, const PointSequence& b) {
  validate_finite(a);
  validate_finite(b);
  detail::require(a.size() >= 3 && b.size() >= 3, "polygon needs >= 3 points");
  const double area_a = std::abs(signed_area(a));
  const double area_b = std::abs(signed_area(b));
  detail::require(area_a > 0.0 && area_b > 0.0, "polygon with zero area");
  if (!is_simple(a)) throw ValidationError("first polygon is self-intersecting");
  if (!is_simple(b)) throw ValidationError("second polygon is self-intersecting");
  const double inter = std::min({intersection_area(a, b), area_a, area_b});
  const double uni = area_a + area_b - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

}  // namespace pointperc
