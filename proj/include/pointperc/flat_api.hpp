#pragma once

// Flat-array calling convention for foreign-language bindings. Points travel
// as [x1, y1, ..., xK, yK] in double precision. Every call delegates to the
// library routine; failures come back as a BoundaryError value, never as an
// exception crossing the boundary.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "pointperc/codecs.hpp"
#include "pointperc/errors.hpp"
#include "pointperc/metrics.hpp"
#include "pointperc/sapl.hpp"

namespace pointperc::flat {

inline constexpr int kAbiVersion = 1;

inline int abi_version() { return kAbiVersion; }

struct BoundaryError {
  std::string message;
  std::size_t lhs_length = 0;
  std::size_t rhs_length = 0;
};

template <typename T>
using Result = std::variant<T, BoundaryError>;

struct LossResult {
  double total = 0.0;
  double l1 = 0.0;
  double sapl = 0.0;
  std::vector<double> grad;
};

struct ApResult {
  double mean_ap = 0.0;
  std::vector<double> thresholds;
  std::vector<double> ap;
};

inline Result<PointSequence> to_sequence(std::span<const double> buf, bool cyclic) {
  if (buf.size() % 2 != 0) return BoundaryError{"point buffer length must be even", buf.size(), 0};
  PointSequence seq;
  seq.cyclic = cyclic;
  for (std::size_t i = 0; i + 1 < buf.size(); i += 2) seq.points.push_back({buf[i], buf[i + 1]});
  return seq;
}

inline std::vector<double> to_buffer(const PointSequence& seq) {
  std::vector<double> out;
  out.reserve(2 * seq.size());
  for (const Point2& p : seq.points) {
    out.push_back(p.x);
    out.push_back(p.y);
  }
  return out;
}

namespace detail {

template <typename F>
auto guarded(F&& f) -> Result<decltype(f())> {
  try {
    return f();
  } catch (const std::exception& e) {
    return BoundaryError{e.what(), 0, 0};
  }
}

}  // namespace detail

inline Result<LossResult> point_loss(std::span<const double> pred, std::span<const double> gt, std::size_t n_hops,
                                     bool cyclic) {
  if (pred.size() != gt.size()) return BoundaryError{"pred and gt buffers differ in length", pred.size(), gt.size()};
  auto p = to_sequence(pred, cyclic);
  if (auto* e = std::get_if<BoundaryError>(&p)) return *e;
  auto g = to_sequence(gt, cyclic);
  if (auto* e = std::get_if<BoundaryError>(&g)) return *e;
  return detail::guarded([&] {
    SaplConfig cfg;
    cfg.n_hops = n_hops;
    const LossBreakdown lb = pointperc::point_loss(std::get<PointSequence>(p), std::get<PointSequence>(g), cfg);
    LossResult r{lb.total, lb.l1_term, lb.sapl_term, {}};
    r.grad.reserve(2 * lb.per_point_grad.size());
    for (const PointGrad& pg : lb.per_point_grad) {
      r.grad.push_back(pg.dx);
      r.grad.push_back(pg.dy);
    }
    return r;
  });
}

inline Result<std::vector<double>> encode_mask(std::span<const double> poly, std::size_t m) {
  auto p = to_sequence(poly, true);
  if (auto* e = std::get_if<BoundaryError>(&p)) return *e;
  return detail::guarded([&] { return to_buffer(pointperc::encode_mask(std::get<PointSequence>(p), m).points); });
}

inline Result<double> oks(std::span<const double> pred, std::span<const double> gt, std::span<const std::uint8_t> mask,
                          double area, double kappa) {
  if (pred.size() != gt.size()) return BoundaryError{"pred and gt buffers differ in length", pred.size(), gt.size()};
  if (2 * mask.size() != gt.size()) return BoundaryError{"mask length must be half the point buffer", mask.size(), gt.size()};
  auto p = to_sequence(pred, false);
  if (auto* e = std::get_if<BoundaryError>(&p)) return *e;
  auto g = to_sequence(gt, false);
  if (auto* e = std::get_if<BoundaryError>(&g)) return *e;
  return detail::guarded([&] {
    const CanonicalPointSet ps{TaskKind::Pose, std::get<PointSequence>(p), std::nullopt};
    const CanonicalPointSet gs{TaskKind::Pose, std::get<PointSequence>(g), std::nullopt};
    return pointperc::oks(ps, gs, std::vector<bool>(mask.begin(), mask.end()), area, kappa);
  });
}

// Single-category AP from precomputed similarities: `similarity` is a
// detections x ground-truths row-major matrix.
inline Result<ApResult> average_precision(std::span<const long long> det_images, std::span<const double> scores,
                                          std::span<const long long> gt_images, std::span<const double> similarity) {
  if (det_images.size() != scores.size())
    return BoundaryError{"detection image ids and scores differ in length", det_images.size(), scores.size()};
  if (similarity.size() != det_images.size() * gt_images.size())
    return BoundaryError{"similarity matrix has the wrong size", similarity.size(),
                         det_images.size() * gt_images.size()};
  return detail::guarded([&] {
    std::vector<Detection> dets;
    for (std::size_t i = 0; i < det_images.size(); ++i) {
      Detection d;
      d.category_id = 0;
      d.score = scores[i];
      d.image_id = det_images[i];
      d.points.points.points.push_back({static_cast<double>(i), 0.0});
      dets.push_back(std::move(d));
    }
    std::vector<GroundTruth> gts;
    for (std::size_t j = 0; j < gt_images.size(); ++j) {
      GroundTruth g;
      g.image_id = gt_images[j];
      g.points.points.points.push_back({static_cast<double>(j), 0.0});
      gts.push_back(std::move(g));
    }
    const std::size_t ng = gt_images.size();
    const Similarity lookup = [&](const Detection& d, const GroundTruth& g) {
      const auto i = static_cast<std::size_t>(d.points.points[0].x);
      const auto j = static_cast<std::size_t>(g.points.points[0].x);
      return similarity[i * ng + j];
    };
    const CategoryAP ap = pointperc::average_precision(dets, gts, lookup);
    ApResult r;
    r.mean_ap = ap.mean_ap;
    for (const auto& [t, v] : ap.ap_per_threshold) {
      r.thresholds.push_back(t);
      r.ap.push_back(v);
    }
    return r;
  });
}

}  // namespace pointperc::flat
