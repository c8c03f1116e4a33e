#pragma once

// Finite-difference suites behind `pointperc gradcheck`: the point loss on
// random smooth pairs, and every decoder parameter on a tiny config.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "pointperc/decoder.hpp"
#include "pointperc/gradcheck.hpp"
#include "pointperc/random.hpp"
#include "pointperc/sapl.hpp"
#include "pointperc/toy_data.hpp"

namespace pointperc {

inline std::vector<double> flatten_params(const DecoderParams& p) {
  std::vector<double> out;
  p.for_each_tensor(
      [&](const std::string&, const Matrix& m) { out.insert(out.end(), m.values().begin(), m.values().end()); });
  return out;
}

inline void assign_params(DecoderParams& p, const std::vector<double>& x) {
  std::size_t k = 0;
  p.for_each_tensor([&](const std::string&, Matrix& m) {
    for (double& v : m.values()) v = x[k++];
  });
}

// The loss is piecewise smooth: |.| kinks at zero residual and zero angle
// gap, and the angle itself is not differentiable at 0 or pi. Draws stay at
// least `margin` away from all of them so a step of 1e-6 never crosses one.
inline bool away_from_kinks(const PointSequence& pred, const PointSequence& gt, std::size_t hops, double margin) {
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (std::abs(pred[i].x - gt[i].x) < margin || std::abs(pred[i].y - gt[i].y) < margin) return false;
  for (std::size_t n = 1; n <= hops; ++n) {
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (!detail::sapl_neighbors(pred.size(), pred.cyclic, i, n)) continue;
      const double tp = hop_angle(pred, i, n).radians;
      const double tg = hop_angle(gt, i, n).radians;
      if (tp < margin || tp > std::numbers::pi - margin) return false;
      if (std::abs(std::sin(tp / 2.0) - std::sin(tg / 2.0)) < margin) return false;
    }
  }
  return true;
}

struct PointPair {
  PointSequence pred;
  PointSequence gt;
};

inline PointPair smooth_point_pair(Rng& rng, std::size_t k, bool cyclic, std::size_t hops, double margin = 1e-4) {
  for (;;) {
    PointPair p;
    p.pred.cyclic = p.gt.cyclic = cyclic;
    for (std::size_t i = 0; i < k; ++i) {
      const Point2 g{rng.uniform(-20, 20), rng.uniform(-20, 20)};
      p.gt.points.push_back(g);
      p.pred.points.push_back({g.x + rng.uniform(-3, 3), g.y + rng.uniform(-3, 3)});
    }
    if (away_from_kinks(p.pred, p.gt, hops, margin)) return p;
  }
}

// `fault` scales the analytic gradient by 1.01: a negative control that must fail.
inline double point_loss_gradcheck(const PointSequence& pred, const PointSequence& gt, const SaplConfig& cfg,
                                   bool fault = false) {
  const LossBreakdown lb = point_loss(pred, gt, cfg);
  std::vector<double> analytic, x;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    analytic.push_back(lb.per_point_grad[i].dx);
    analytic.push_back(lb.per_point_grad[i].dy);
    x.push_back(pred[i].x);
    x.push_back(pred[i].y);
  }
  if (fault)
    for (double& g : analytic) g *= 1.01;
  PointSequence probe = pred;
  auto f = [&] {
    for (std::size_t i = 0; i < probe.size(); ++i) probe.points[i] = {x[2 * i], x[2 * i + 1]};
    return point_loss(probe, gt, cfg).total;
  };
  return max_relative_error(analytic, central_difference(f, x));
}

inline double decoder_gradcheck(const DecoderParams& p, const TrainSample& s, const SaplConfig& cfg,
                                bool fault = false) {
  const LossAndGrad lg = loss_and_grad(p, s, cfg);
  std::vector<double> analytic = flatten_params(lg.grad);
  if (fault)
    for (double& g : analytic) g *= 1.01;
  std::vector<double> x = flatten_params(p);
  DecoderParams probe = p;
  auto f = [&] {
    assign_params(probe, x);
    return sample_loss(probe, s, cfg);
  };
  return max_relative_error(analytic, central_difference(f, x));
}

inline DecoderConfig tiny_decoder_config() {
  DecoderConfig c;
  c.d = 8;
  c.d_ff = 16;
  c.layers = 1;
  c.roi_side = 3;
  c.head_hidden = 8;
  return c;
}

struct GradcheckEntry {
  std::string name;
  std::size_t cases = 0;
  double max_error = 0.0;
  bool passed = false;
};

inline std::vector<GradcheckEntry> run_gradcheck_suite(std::uint64_t seed, bool fault = false) {
  std::vector<GradcheckEntry> out;
  for (const bool cyclic : {true, false}) {
    GradcheckEntry e{cyclic ? "point_loss_cyclic_k32" : "point_loss_open_k8", 0, 0.0, false};
    Rng rng(hash_seed({seed, cyclic ? 1ULL : 2ULL}));
    for (std::size_t trial = 0; trial < 100; ++trial) {
      SaplConfig cfg;
      cfg.n_hops = 1 + trial % 4;
      const PointPair pp = smooth_point_pair(rng, cyclic ? 32 : 8, cyclic, cfg.n_hops);
      e.max_error = std::max(e.max_error, point_loss_gradcheck(pp.pred, pp.gt, cfg, fault));
      ++e.cases;
    }
    e.passed = e.max_error < kGradcheckTolerance;
    out.push_back(e);
  }
  GradcheckEntry d{"decoder_tiny", 0, 0.0, false};
  EpisodeConfig ecfg;
  ecfg.box_points = 4;
  const DecoderConfig cfg = tiny_decoder_config();
  for (std::uint64_t k = 0; k < 3; ++k) {
    const DecoderParams p = init_params(cfg, hash_seed({seed, 3ULL, k}));
    const TrainSample s = make_toy_sample(seed + k, TaskKind::Detect, cfg.d, ecfg);
    d.max_error = std::max(d.max_error, decoder_gradcheck(p, s, SaplConfig{}, fault));
    ++d.cases;
  }
  d.passed = d.max_error < kGradcheckTolerance;
  out.push_back(d);
  return out;
}

}  // namespace pointperc
