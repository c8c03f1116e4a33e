#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "pointperc/demos.hpp"
#include "pointperc/gradcheck.hpp"
#include "pointperc/sapl.hpp"

using namespace pointperc;

namespace {

SaplConfig hops(std::size_t n) {
  SaplConfig c;
  c.n_hops = n;
  return c;
}

PointSequence similarity(const PointSequence& s, double angle, double scale, Point2 shift) {
  PointSequence out = s;
  const double c = std::cos(angle), sn = std::sin(angle);
  for (Point2& p : out.points) p = {scale * (c * p.x - sn * p.y) + shift.x, scale * (sn * p.x + c * p.y) + shift.y};
  return out;
}

double gradcheck_error(const PointSequence& pred, const PointSequence& gt, const SaplConfig& cfg) {
  const LossBreakdown lb = point_loss(pred, gt, cfg);
  std::vector<double> analytic;
  for (const PointGrad& g : lb.per_point_grad) {
    analytic.push_back(g.dx);
    analytic.push_back(g.dy);
  }
  std::vector<double> x;
  for (const Point2& p : pred.points) {
    x.push_back(p.x);
    x.push_back(p.y);
  }
  PointSequence probe = pred;
  auto f = [&] {
    for (std::size_t i = 0; i < probe.size(); ++i) probe.points[i] = {x[2 * i], x[2 * i + 1]};
    return point_loss(probe, gt, cfg).total;
  };
  const std::vector<double> numeric = central_difference(f, x);
  return max_relative_error(analytic, numeric);
}

}  // namespace

TEST(Sapl, ZeroOnIdenticalAndTranslatedShapes) {
  const auto sq = make_closed({{0, 0}, {2, 0}, {2, 2}, {0, 2}});
  EXPECT_EQ(sapl_loss(sq, sq, hops(1)), 0.0);
  const auto moved = make_closed({{5, 7}, {7, 7}, {7, 9}, {5, 9}});
  EXPECT_NEAR(sapl_loss(moved, sq, hops(1)), 0.0, 1e-15);
}

TEST(Sapl, SkewedSquareMatchesEnumeration) {
  const auto gt = make_closed({{0, 0}, {2, 0}, {2, 2}, {0, 2}});
  const auto pred = make_closed({{0, 0}, {2, 0}, {2, 2}, {-1, 2}});
  const double got = sapl_loss(pred, gt, hops(1));
  EXPECT_NEAR(got, oracle::sapl(pred, gt, 1, true), 1e-14);
  EXPECT_GT(got, 0.0);
}

TEST(Sapl, RandomPairsMatchEnumeration) {
  Rng rng(101);
  for (int trial = 0; trial < 200; ++trial) {
    const bool cyclic = trial % 2 == 0;
    const std::size_t k = cyclic ? 3 + rng.below(40) : 1 + rng.below(20);
    const std::size_t n = 1 + rng.below(5);
    const auto pair = oracle::random_loss_pair(rng, k, cyclic, 0);
    EXPECT_NEAR(sapl_loss(pair.pred, pair.gt, hops(n)), oracle::sapl(pair.pred, pair.gt, n, cyclic), 1e-12)
        << "k=" << k << " n=" << n << " cyclic=" << cyclic;
  }
}

TEST(Sapl, PropertiesOnRandomPairs) {
  Rng rng(102);
  for (int trial = 0; trial < 100; ++trial) {
    const auto pair = oracle::random_loss_pair(rng, 16, true, 0);
    const SaplConfig cfg = hops(1 + rng.below(4));
    const double v = sapl_loss(pair.pred, pair.gt, cfg);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_NEAR(v, sapl_loss(pair.gt, pair.pred, cfg), 1e-15);
    EXPECT_EQ(sapl_loss(pair.pred, pair.pred, cfg), 0.0);
    const double angle = rng.uniform(0, 6), scale = rng.uniform(0.2, 5);
    const Point2 shift{rng.uniform(-100, 100), rng.uniform(-100, 100)};
    EXPECT_NEAR(v, sapl_loss(similarity(pair.pred, angle, scale, shift), similarity(pair.gt, angle, scale, shift), cfg),
                1e-9);
    EXPECT_NE(sapl_loss(pair.pred, pair.gt, hops(1)), sapl_loss(pair.pred, pair.gt, hops(2)));
  }
}

TEST(Sapl, OpenChainSkipsEndpoints) {
  // a single interior vertex at hop 1; hop 2 has none and is left out
  const auto gt = make_open({{0, 0}, {1, 0}, {2, 0}});
  const auto pred = make_open({{0, 0}, {1, 1}, {2, 0}});
  const double want = std::abs(std::sin(std::numbers::pi / 4.0) - 1.0);
  EXPECT_NEAR(sapl_loss(pred, gt, hops(1)), want, 1e-15);
  EXPECT_NEAR(sapl_loss(pred, gt, hops(2)), want, 1e-15);
  // a single point (counting) has no angles
  EXPECT_EQ(sapl_loss(make_open({{3, 3}}), make_open({{0, 0}}), hops(2)), 0.0);
}

TEST(Sapl, Errors) {
  const auto a = make_closed({{0, 0}, {1, 0}, {1, 1}});
  const auto b = make_closed({{0, 0}, {1, 0}, {1, 1}, {0, 1}});
  EXPECT_THROW(sapl_loss(a, b), ValidationError);
  EXPECT_THROW(sapl_loss(make_closed({{0, 0}, {1, 0}}), make_closed({{0, 0}, {1, 0}})), ValidationError);
  EXPECT_THROW(sapl_loss(a, make_open(a.points)), ValidationError);
  EXPECT_THROW(sapl_loss(a, a, hops(0)), ValidationError);
}

TEST(PointLoss, ZeroAtGroundTruth) {
  Rng rng(103);
  const auto pair = oracle::random_loss_pair(rng, 12, true, 0);
  const LossBreakdown lb = point_loss(pair.gt, pair.gt);
  EXPECT_EQ(lb.total, 0.0);
  for (const PointGrad& g : lb.per_point_grad) {
    EXPECT_EQ(g.dx, 0.0);
    EXPECT_EQ(g.dy, 0.0);
  }
}

TEST(PointLoss, TotalIsSumOfTerms) {
  Rng rng(104);
  const auto pair = oracle::random_loss_pair(rng, 32, true, 2);
  const LossBreakdown lb = point_loss(pair.pred, pair.gt);
  EXPECT_NEAR(lb.total, lb.l1_term + lb.sapl_term, 1e-12);
  double l1 = 0.0;
  for (std::size_t i = 0; i < 32; ++i)
    l1 += std::abs(pair.pred[i].x - pair.gt[i].x) + std::abs(pair.pred[i].y - pair.gt[i].y);
  EXPECT_NEAR(lb.l1_term, l1 / 32.0, 1e-14);
  EXPECT_EQ(lb.per_point_grad.size(), 32u);
}

TEST(PointLoss, GradcheckCyclic) {
  Rng rng(105);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(trial % 4);
    const auto pair = oracle::random_loss_pair(rng, 32, true, n);
    ASSERT_LT(gradcheck_error(pair.pred, pair.gt, hops(n)), kGradcheckTolerance) << "trial " << trial;
  }
}

TEST(PointLoss, GradcheckOpen) {
  Rng rng(106);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(trial % 4);
    const auto pair = oracle::random_loss_pair(rng, 8, false, n);
    ASSERT_LT(gradcheck_error(pair.pred, pair.gt, hops(n)), kGradcheckTolerance) << "trial " << trial;
  }
}

TEST(PointLoss, CollapsedRayHasNoSaplGradient) {
  const auto gt = make_open({{0, 0}, {1, 0}, {2, 0}});
  const auto pred = make_open({{1, 1}, {1, 1}, {3, 0}});
  SaplConfig cfg = hops(1);
  const LossBreakdown with = point_loss(pred, gt, cfg);
  cfg.use_sapl = false;
  const LossBreakdown without = point_loss(pred, gt, cfg);
  EXPECT_EQ(with.sapl_term, 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(with.per_point_grad[i].dx, without.per_point_grad[i].dx);
    EXPECT_EQ(with.per_point_grad[i].dy, without.per_point_grad[i].dy);
  }
}

TEST(PointLoss, DiamondCandidatesSeparate) {
  for (std::size_t n = 1; n <= 4; ++n) {
    const DiamondCase d = diamond_case();
    const LossBreakdown a = point_loss(d.along_edge, d.gt, hops(n));
    const LossBreakdown b = point_loss(d.off_edge, d.gt, hops(n));
    EXPECT_NEAR(a.l1_term, b.l1_term, 1e-12);
    EXPECT_NE(a.total, b.total);
    EXPECT_GT(a.total, 0.0);
    EXPECT_GT(b.total, 0.0);
    EXPECT_EQ(point_loss(d.gt, d.gt, hops(n)).total, 0.0);
  }
}

TEST(PointLoss, WholeDiamondHasEqualL1) {
  // every point of the L1 ball around the moved vertex gives the same l1_term
  const DiamondCase d = diamond_case();
  const double ref = point_loss(d.along_edge, d.gt).l1_term;
  std::vector<double> totals;
  for (int k = 0; k < 16; ++k) {
    const double t = 2.0 * std::numbers::pi * k / 16.0;
    const double c = std::cos(t), s = std::sin(t);
    const double scale = 1.0 / (std::abs(c) + std::abs(s));
    PointSequence p = d.gt;
    p.points[d.moved].x += c * scale;
    p.points[d.moved].y += s * scale;
    const LossBreakdown lb = point_loss(p, d.gt);
    EXPECT_NEAR(lb.l1_term, ref, 1e-12);
    totals.push_back(lb.total);
  }
  EXPECT_NE(*std::min_element(totals.begin(), totals.end()), *std::max_element(totals.begin(), totals.end()));
}

TEST(FitPoints, StaysAtGroundTruth) {
  const auto gt = star_polygon(5, {0, 0}, 10, 4);
  const FitResult r = fit_points(gt, gt, SaplConfig{}, 10, 0.5);
  EXPECT_EQ(r.points, gt);
  ASSERT_EQ(r.trace.size(), 11u);
  for (double v : r.trace) EXPECT_EQ(v, 0.0);
}

TEST(FitPoints, L1OnlyConverges) {
  const auto gt = star_polygon(5, {0, 0}, 10, 4);
  PointSequence init = gt;
  for (Point2& p : init.points) p = p + Point2{0.3, -0.2};
  SaplConfig cfg;
  cfg.use_sapl = false;
  // per-coordinate steps of lr/K = 0.01 reach the target exactly
  const FitResult r = fit_points(init, gt, cfg, 40, 0.1);
  EXPECT_LT(mean_point_error(r.points, gt), 1e-9);
  EXPECT_THROW(fit_points(init, gt, cfg, 1, 0.0), ValidationError);
}

TEST(FitPoints, StructureTermHelpsOnStar) {
  const FitScenario sc = fit_scenario("star", 0);
  SaplConfig l1;
  l1.use_sapl = false;
  const SaplConfig both = hops(2);
  const double e_l1 = mean_point_error(fit_points(sc.init, sc.gt, l1, 100, 0.5).points, sc.gt);
  const double e_sapl = mean_point_error(fit_points(sc.init, sc.gt, both, 100, 0.5).points, sc.gt);
  EXPECT_LE(e_sapl, e_l1);
}
