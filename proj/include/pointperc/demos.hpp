#pragma once

// Fixed point-fitting scenarios shared by the CLI fit demo and the tests.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "pointperc/codecs.hpp"
#include "pointperc/errors.hpp"
#include "pointperc/geometry.hpp"
#include "pointperc/random.hpp"
#include "pointperc/sapl.hpp"

namespace pointperc {

// Star with `tips` outer vertices, alternating outer/inner radius, listed
// clockwise on screen from the top tip.
inline PointSequence star_polygon(std::size_t tips, Point2 c, double outer, double inner) {
  detail::require(tips >= 3, "star needs >= 3 tips");
  PointSequence s;
  s.cyclic = true;
  const std::size_t k = 2 * tips;
  for (std::size_t i = 0; i < k; ++i) {
    const double t = -std::numbers::pi / 2.0 + 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(k);
    const double r = (i % 2 == 0) ? outer : inner;
    s.points.push_back({c.x + r * std::cos(t), c.y + r * std::sin(t)});
  }
  return s;
}

inline PointSequence jitter(const PointSequence& s, double sigma, std::uint64_t seed) {
  Rng rng(hash_seed({seed, 0x6a6974ULL}));
  PointSequence out = s;
  for (Point2& p : out.points) {
    p.x += sigma * rng.normal();
    p.y += sigma * rng.normal();
  }
  return out;
}

struct FitScenario {
  PointSequence gt;
  PointSequence init;
};

inline FitScenario fit_scenario(std::string_view shape, std::uint64_t seed) {
  if (shape == "square") {
    const PointSequence gt = encode_box({0, 0, 32, 32}, 16).points;
    return {gt, jitter(gt, 3.0, seed)};
  }
  if (shape == "star") {
    const PointSequence gt = star_polygon(8, {40, 40}, 30, 14);
    return {gt, jitter(gt, 3.0, seed)};
  }
  throw ValidationError("unknown fit shape '" + std::string(shape) + "'");
}

// Two predictions on the L1 ball of radius `r` around one ground-truth
// point: one slides that point along its edge, the other pushes it off the
// edge. Both have the same L1 error; only the second bends the outline.
struct DiamondCase {
  PointSequence gt;
  PointSequence along_edge;
  PointSequence off_edge;
  std::size_t moved = 0;
};

inline DiamondCase diamond_case(double r = 1.0) {
  DiamondCase d;
  d.gt = encode_box({0, 0, 8, 8}, 16).points;
  d.moved = 2;  // (4, 0), midpoint of the top edge
  d.along_edge = d.gt;
  d.along_edge.points[d.moved].x += r;
  d.off_edge = d.gt;
  d.off_edge.points[d.moved].y -= r;
  return d;
}

}  // namespace pointperc
