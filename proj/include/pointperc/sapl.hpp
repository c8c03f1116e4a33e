#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "pointperc/errors.hpp"
#include "pointperc/geometry.hpp"

namespace pointperc {

struct SaplConfig {
  std::size_t n_hops = 2;
  // Overrides the sequences' own cyclic flag when set.
  std::optional<bool> cyclic;
  double degeneracy_eps = kDegenerateRayEps;
  // false gives the plain L1 objective.
  bool use_sapl = true;
};

struct PointGrad {
  double dx = 0.0;
  double dy = 0.0;
};

struct LossBreakdown {
  double l1_term = 0.0;
  double sapl_term = 0.0;
  double total = 0.0;
  std::vector<PointGrad> per_point_grad;
};

namespace detail {

inline double sign(double v) { return static_cast<double>((v > 0.0) - (v < 0.0)); }

// sin(theta/2) at vertex i for hop n plus its derivative w.r.t. the three
// participating points. Collapsed rays give 1 with zero gradient.
struct HalfAngleSine {
  double value = 1.0;
  Point2 d_prev;
  Point2 d_center;
  Point2 d_next;
};

inline HalfAngleSine half_angle_sine(Point2 prev, Point2 center, Point2 next, double eps) {
  const Point2 u = prev - center;
  const Point2 v = next - center;
  const double uu = dot(u, u);
  const double vv = dot(v, v);
  HalfAngleSine out;
  if (std::sqrt(uu) < eps || std::sqrt(vv) < eps) return out;
  const double c = cross(u, v);
  const double phi = std::atan2(c, dot(u, v));
  const double theta = std::abs(phi);
  out.value = std::sin(theta / 2.0);
  // d sin(|phi|/2) / d phi, then phi = arg(v) - arg(u).
  const double df = sign(phi) * std::cos(theta / 2.0) / 2.0;
  out.d_prev = {df * u.y / uu, -df * u.x / uu};
  out.d_next = {-df * v.y / vv, df * v.x / vv};
  out.d_center = {-(out.d_prev.x + out.d_next.x), -(out.d_prev.y + out.d_next.y)};
  return out;
}

inline bool effective_cyclic(const PointSequence& pred, const PointSequence& gt, const SaplConfig& cfg) {
  detail::require(pred.size() == gt.size(),
                  "length mismatch: pred " + std::to_string(pred.size()) + " vs gt " +
                      std::to_string(gt.size()));
  validate_finite(pred);
  validate_finite(gt);
  if (cfg.cyclic) return *cfg.cyclic;
  detail::require(pred.cyclic == gt.cyclic, "pred and gt cyclic flags differ");
  return pred.cyclic;
}

// Neighbour pair at hop n, skipping hops that fold onto themselves on a
// closed contour (2n >= K).
inline std::optional<std::pair<std::size_t, std::size_t>> sapl_neighbors(std::size_t k, bool cyclic,
                                                                         std::size_t i, std::size_t n) {
  if (cyclic && 2 * n >= k) return std::nullopt;
  return hop_neighbors(k, cyclic, i, n);
}

inline double sapl_impl(const PointSequence& pred, const PointSequence& gt, const SaplConfig& cfg,
                        std::vector<PointGrad>* grad) {
  const bool cyclic = effective_cyclic(pred, gt, cfg);
  const std::size_t k = pred.size();
  detail::require(cfg.n_hops >= 1, "n_hops must be >= 1");
  if (cyclic) detail::require(k >= 3, "cyclic sequence needs >= 3 points");

  // First pass: which hops have any valid vertex.
  std::size_t valid_hops = 0;
  for (std::size_t n = 1; n <= cfg.n_hops; ++n) {
    for (std::size_t i = 0; i < k; ++i) {
      if (sapl_neighbors(k, cyclic, i, n)) {
        ++valid_hops;
        break;
      }
    }
  }
  if (valid_hops == 0) return 0.0;
  const double hop_weight = 1.0 / static_cast<double>(valid_hops);

  double loss = 0.0;
  for (std::size_t n = 1; n <= cfg.n_hops; ++n) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < k; ++i) count += sapl_neighbors(k, cyclic, i, n).has_value();
    if (count == 0) continue;
    const double w = hop_weight / static_cast<double>(count);
    double hop_sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      const auto nb = sapl_neighbors(k, cyclic, i, n);
      if (!nb) continue;
      const auto [a, b] = *nb;
      const HalfAngleSine hp = half_angle_sine(pred[a], pred[i], pred[b], cfg.degeneracy_eps);
      const HalfAngleSine hg = half_angle_sine(gt[a], gt[i], gt[b], cfg.degeneracy_eps);
      const double diff = hp.value - hg.value;
      hop_sum += std::abs(diff);
      if (grad) {
        const double s = w * sign(diff);
        (*grad)[a].dx += s * hp.d_prev.x;
        (*grad)[a].dy += s * hp.d_prev.y;
        (*grad)[i].dx += s * hp.d_center.x;
        (*grad)[i].dy += s * hp.d_center.y;
        (*grad)[b].dx += s * hp.d_next.x;
        (*grad)[b].dy += s * hp.d_next.y;
      }
    }
    loss += w * hop_sum;
  }
  return loss;
}

}  // namespace detail

// Mean over hops 1..N of the mean |sin(theta_pred/2) - sin(theta_gt/2)| over
// vertices that have both n-hop neighbours.
inline double sapl_loss(const PointSequence& pred, const PointSequence& gt, const SaplConfig& cfg = {}) {
  return detail::sapl_impl(pred, gt, cfg, nullptr);
}

// Mean per-point L1 plus SAPL, with the exact gradient w.r.t. every
// predicted coordinate. Subgradient of |.| at 0 is 0.
inline LossBreakdown point_loss(const PointSequence& pred, const PointSequence& gt, const SaplConfig& cfg = {}) {
  detail::effective_cyclic(pred, gt, cfg);
  const std::size_t k = pred.size();
  detail::require(k >= 1, "empty point sequence");
  LossBreakdown out;
  out.per_point_grad.assign(k, PointGrad{});
  const double inv_k = 1.0 / static_cast<double>(k);
  double l1 = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double ex = pred[i].x - gt[i].x;
    const double ey = pred[i].y - gt[i].y;
    l1 += std::abs(ex) + std::abs(ey);
    out.per_point_grad[i].dx = detail::sign(ex) * inv_k;
    out.per_point_grad[i].dy = detail::sign(ey) * inv_k;
  }
  out.l1_term = l1 * inv_k;
  if (cfg.use_sapl) out.sapl_term = detail::sapl_impl(pred, gt, cfg, &out.per_point_grad);
  out.total = out.l1_term + out.sapl_term;
  return out;
}

inline double mean_point_error(const PointSequence& a, const PointSequence& b) {
  detail::require(a.size() == b.size() && !a.empty(), "mean_point_error needs equal non-empty sequences");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += norm(a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

struct FitResult {
  PointSequence points;
  // trace[s] is the total loss before update s; the last entry is the final loss.
  std::vector<double> trace;
};

// Plain gradient descent on point_loss(...).total directly over the points.
inline FitResult fit_points(const PointSequence& init, const PointSequence& gt, const SaplConfig& cfg,
                            std::size_t steps, double lr) {
  detail::require(lr > 0.0, "learning rate must be positive");
  FitResult res{init, {}};
  res.trace.reserve(steps + 1);
  for (std::size_t s = 0; s < steps; ++s) {
    const LossBreakdown lb = point_loss(res.points, gt, cfg);
    res.trace.push_back(lb.total);
    for (std::size_t i = 0; i < res.points.size(); ++i) {
      res.points[i].x -= lr * lb.per_point_grad[i].dx;
      res.points[i].y -= lr * lb.per_point_grad[i].dy;
    }
  }
  res.trace.push_back(point_loss(res.points, gt, cfg).total);
  return res;
}

}  // namespace pointperc
