#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pointperc/errors.hpp"
#include "pointperc/geometry.hpp"

namespace pointperc {

enum class TaskKind { Detect, Segment, Pose, Count };

inline std::string_view to_string(TaskKind t) {
  switch (t) {
    case TaskKind::Detect: return "detect";
    case TaskKind::Segment: return "segment";
    case TaskKind::Pose: return "pose";
    case TaskKind::Count: return "count";
  }
  return "unknown";
}

inline TaskKind parse_task(std::string_view s) {
  if (s == "detect") return TaskKind::Detect;
  if (s == "segment") return TaskKind::Segment;
  if (s == "pose") return TaskKind::Pose;
  if (s == "count") return TaskKind::Count;
  throw ValidationError("unknown task '" + std::string(s) + "'");
}

inline constexpr std::size_t kDefaultBoxPoints = 16;
inline constexpr std::size_t kDefaultMaskPoints = 32;

// Proposal box as center + size; both sizes strictly positive.
struct Anchor {
  double cx = 0.0;
  double cy = 0.0;
  double w = 1.0;
  double h = 1.0;

  static Anchor from_box(const BBox& b) { return {b.x + b.w / 2.0, b.y + b.h / 2.0, b.w, b.h}; }
  BBox to_box() const { return {cx - w / 2.0, cy - h / 2.0, w, h}; }
};

// Anchor-normalised offset of one point.
struct Offset {
  double dx = 0.0;
  double dy = 0.0;
  friend bool operator==(const Offset&, const Offset&) = default;
};
using OffsetSet = std::vector<Offset>;

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  bool visible = true;
  friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

// Universal per-instance output: the meaning of the points is fixed by the task.
struct CanonicalPointSet {
  TaskKind task = TaskKind::Detect;
  PointSequence points;
  std::optional<std::vector<bool>> visibility;  // Pose only

  std::size_t size() const { return points.size(); }
  friend bool operator==(const CanonicalPointSet&, const CanonicalPointSet&) = default;
};

inline bool is_allowed_count(TaskKind task, std::size_t count) {
  switch (task) {
    case TaskKind::Detect: return count == 4 || count == 8 || count == 16;
    case TaskKind::Segment: return count == 16 || count == 32 || count == 64;
    case TaskKind::Count: return count == 1;
    case TaskKind::Pose: return count >= 1;
  }
  return false;
}

inline void validate(const CanonicalPointSet& ps) {
  detail::require(is_allowed_count(ps.task, ps.size()),
                  "point count " + std::to_string(ps.size()) + " invalid for task " +
                      std::string(to_string(ps.task)));
  const bool want_cyclic = ps.task == TaskKind::Detect || ps.task == TaskKind::Segment;
  detail::require(ps.points.cyclic == want_cyclic, "cyclic flag does not match task");
  if (ps.visibility) {
    detail::require(ps.task == TaskKind::Pose, "visibility only applies to pose");
    detail::require(ps.visibility->size() == ps.size(), "visibility length mismatch");
  }
  validate_finite(ps.points);
}

// m/4 equally spaced points per side, clockwise from the top-left corner.
// Every corner is sampled, so decode_box recovers the box.
inline CanonicalPointSet encode_box(const BBox& b, std::size_t m = kDefaultBoxPoints) {
  detail::require(b.w > 0.0 && b.h > 0.0, "degenerate box");
  detail::require(m >= 4 && m % 4 == 0, "box point count must be a positive multiple of 4");
  const std::size_t q = m / 4;
  const double fq = static_cast<double>(q);
  PointSequence seq;
  seq.cyclic = true;
  seq.points.reserve(m);
  const double x1 = b.x + b.w;
  const double y1 = b.y + b.h;
  for (std::size_t k = 0; k < q; ++k) seq.points.push_back({b.x + b.w * (static_cast<double>(k) / fq), b.y});
  for (std::size_t k = 0; k < q; ++k) seq.points.push_back({x1, b.y + b.h * (static_cast<double>(k) / fq)});
  for (std::size_t k = 0; k < q; ++k) seq.points.push_back({x1 - b.w * (static_cast<double>(k) / fq), y1});
  for (std::size_t k = 0; k < q; ++k) seq.points.push_back({b.x, y1 - b.h * (static_cast<double>(k) / fq)});
  return {TaskKind::Detect, std::move(seq), std::nullopt};
}

inline BBox decode_box(const CanonicalPointSet& ps) { return bbox_of(ps.points); }

// Canonical form, resample, then restore the leftmost start on the samples.
inline CanonicalPointSet encode_mask(const PointSequence& poly, std::size_t m = kDefaultMaskPoints) {
  PointSequence canon = canonicalize_contour(poly);
  PointSequence resampled = resample_contour(canon, m);
  return {TaskKind::Segment, canonicalize_contour(resampled), std::nullopt};
}

inline CanonicalPointSet encode_center(const BBox& b) {
  return {TaskKind::Count, make_open({b.center()}), std::nullopt};
}

inline CanonicalPointSet encode_pose(const std::vector<Keypoint>& kpts) {
  detail::require(!kpts.empty(), "empty keypoint list");
  CanonicalPointSet ps{TaskKind::Pose, {}, std::vector<bool>{}};
  ps.points.cyclic = false;
  for (const Keypoint& k : kpts) {
    ps.points.points.push_back({k.x, k.y});
    ps.visibility->push_back(k.visible);
  }
  return ps;
}

inline std::vector<Keypoint> decode_pose(const CanonicalPointSet& ps) {
  std::vector<Keypoint> out;
  out.reserve(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const bool vis = ps.visibility ? (*ps.visibility)[i] : true;
    out.push_back({ps.points[i].x, ps.points[i].y, vis});
  }
  return out;
}

// P = A_c + offset * A_size, per axis.
inline PointSequence anchor_decode(const OffsetSet& off, const Anchor& a, bool cyclic = false) {
  PointSequence seq;
  seq.cyclic = cyclic;
  seq.points.reserve(off.size());
  for (const Offset& o : off) seq.points.push_back({a.cx + o.dx * a.w, a.cy + o.dy * a.h});
  return seq;
}

inline OffsetSet anchor_encode(const PointSequence& pts, const Anchor& a) {
  detail::require(a.w > 0.0 && a.h > 0.0, "anchor size must be positive");
  OffsetSet off;
  off.reserve(pts.size());
  for (const Point2& p : pts.points) off.push_back({(p.x - a.cx) / a.w, (p.y - a.cy) / a.h});
  return off;
}

// One line of structured text; fields in the order task, category_id,
// points, visibility.
inline nlohmann::ordered_json to_json(const CanonicalPointSet& ps, long long category_id) {
  nlohmann::ordered_json j;
  j["task"] = std::string(to_string(ps.task));
  j["category_id"] = category_id;
  auto pts = nlohmann::ordered_json::array();
  for (const Point2& p : ps.points.points) pts.push_back({p.x, p.y});
  j["points"] = std::move(pts);
  if (ps.visibility) {
    auto vis = nlohmann::ordered_json::array();
    for (bool v : *ps.visibility) vis.push_back(v);
    j["visibility"] = std::move(vis);
  }
  return j;
}

struct PointSetRecord {
  long long category_id = 0;
  CanonicalPointSet points;
};

template <typename Json>
CanonicalPointSet point_set_from_json(const Json& j) {
  CanonicalPointSet ps;
  ps.task = parse_task(j.at("task").template get<std::string>());
  ps.points.cyclic = ps.task == TaskKind::Detect || ps.task == TaskKind::Segment;
  for (const auto& p : j.at("points")) {
    detail::require(p.is_array() && p.size() == 2, "point must be [x, y]");
    ps.points.points.push_back({p[0].template get<double>(), p[1].template get<double>()});
  }
  if (j.contains("visibility")) {
    std::vector<bool> vis;
    for (const auto& v : j.at("visibility")) vis.push_back(v.template get<bool>());
    ps.visibility = std::move(vis);
  }
  return ps;
}

inline std::string to_record_line(const CanonicalPointSet& ps, long long category_id) {
  return to_json(ps, category_id).dump();
}

inline PointSetRecord parse_record_line(std::string_view line) {
  try {
    const auto j = nlohmann::json::parse(line);
    return {j.at("category_id").get<long long>(), point_set_from_json(j)};
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed point-set record: ") + e.what());
  }
}

}  // namespace pointperc
