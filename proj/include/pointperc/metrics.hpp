#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pointperc/codecs.hpp"
#include "pointperc/errors.hpp"
#include "pointperc/geometry.hpp"

namespace pointperc {

inline constexpr double kDefaultKappa = 0.1;
inline constexpr double kDefaultCountScoreThreshold = 0.5;

struct Detection {
  long long category_id = 0;
  double score = 0.0;
  CanonicalPointSet points;
  long long image_id = 0;
  // Pose: keypoints visible in at least one support image. Absent means all.
  std::optional<std::vector<bool>> support_visibility;
};

struct GroundTruth {
  long long category_id = 0;
  CanonicalPointSet points;
  long long image_id = 0;
  double area = 0.0;
};

using Similarity = std::function<double(const Detection&, const GroundTruth&)>;

// 0.50, 0.55, ..., 0.95, each computed as an exact ratio of integers.
inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back(static_cast<double>(50 + 5 * k) / 100.0);
  return t;
}

// 0.00, 0.01, ..., 1.00
inline std::vector<double> coco_recall_thresholds() {
  std::vector<double> r;
  for (int k = 0; k <= 100; ++k) r.push_back(static_cast<double>(k) / 100.0);
  return r;
}

// mean over evaluable keypoints of exp(-d^2 / (2 * area * kappa^2)).
inline double oks(const CanonicalPointSet& pred, const CanonicalPointSet& gt, const std::vector<bool>& eval_mask,
                  double area, double kappa = kDefaultKappa) {
  detail::require(pred.size() == gt.size(), "oks: keypoint count mismatch");
  detail::require(eval_mask.size() == gt.size(), "oks: mask length mismatch");
  detail::require(area > 0.0, "oks: area must be positive");
  const double denom = 2.0 * area * kappa * kappa;
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!eval_mask[i]) continue;
    const double dx = pred.points[i].x - gt.points[i].x;
    const double dy = pred.points[i].y - gt.points[i].y;
    acc += std::exp(-(dx * dx + dy * dy) / denom);
    ++n;
  }
  detail::require(n > 0, "oks: no evaluable keypoints");
  return acc / static_cast<double>(n);
}

// Keypoints usable for scoring: visible in the query GT and in at least one support.
inline std::vector<bool> pose_eval_mask(const Detection& det, const GroundTruth& gt) {
  std::vector<bool> mask(gt.points.size(), true);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (gt.points.visibility) mask[i] = mask[i] && (*gt.points.visibility)[i];
    if (det.support_visibility && i < det.support_visibility->size())
      mask[i] = mask[i] && (*det.support_visibility)[i];
  }
  return mask;
}

inline Similarity box_similarity() {
  return [](const Detection& d, const GroundTruth& g) { return box_iou(decode_box(d.points), decode_box(g.points)); };
}

// Polygon IoU; a self-intersecting or degenerate prediction scores 0.
inline Similarity mask_similarity() {
  return [](const Detection& d, const GroundTruth& g) {
    try {
      return polygon_iou(d.points.points, g.points.points);
    } catch (const ValidationError&) {
      return 0.0;
    }
  };
}

// OKS; zero when no keypoint is evaluable.
inline Similarity oks_similarity(double kappa = kDefaultKappa) {
  return [kappa](const Detection& d, const GroundTruth& g) {
    const auto mask = pose_eval_mask(d, g);
    if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; })) return 0.0;
    if (d.points.size() != g.points.size() || !(g.area > 0.0)) return 0.0;
    return oks(d.points, g.points, mask, g.area, kappa);
  };
}

struct CategoryAP {
  std::vector<std::pair<double, double>> ap_per_threshold;  // (threshold, AP)
  double mean_ap = 0.0;
};

struct EvalResult {
  std::vector<std::pair<double, double>> ap_per_threshold;  // class-averaged
  double mean_ap = 0.0;
  std::map<long long, CategoryAP> per_class;
  double count_mse = 0.0;
};

namespace detail {

// Descending score; ties keep insertion order.
inline std::vector<std::size_t> score_order(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

}  // namespace detail

// Single-category AP. Greedy matching in score order: each detection takes the
// most similar unmatched GT of its image when similarity >= threshold. AP is
// the 101-point interpolated area under the precision envelope.
inline CategoryAP average_precision(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                    const Similarity& similarity,
                                    const std::vector<double>& thresholds = coco_iou_thresholds()) {
  detail::require(!thresholds.empty(), "no IoU thresholds");
  if (!dets.empty() || !gts.empty()) {
    const long long cat = !gts.empty() ? gts.front().category_id : dets.front().category_id;
    for (const auto& d : dets) detail::require(d.category_id == cat, "average_precision expects one category");
    for (const auto& g : gts) detail::require(g.category_id == cat, "average_precision expects one category");
  }
  for (const auto& d : dets) detail::require(std::isfinite(d.score), "non-finite detection score");

  const auto order = detail::score_order(dets);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  // Similarity table; NaN marks pairs from different images.
  std::vector<std::vector<double>> sim(dets.size(), std::vector<double>(gts.size(), nan));
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (std::size_t j = 0; j < gts.size(); ++j)
      if (dets[i].image_id == gts[j].image_id) sim[i][j] = similarity(dets[i], gts[j]);

  const auto recall_thresholds = coco_recall_thresholds();
  CategoryAP out;
  double acc = 0.0;
  for (double thr : thresholds) {
    double ap = 0.0;
    if (!gts.empty()) {
      std::vector<bool> taken(gts.size(), false);
      std::vector<double> precision;
      std::vector<double> recall;
      std::size_t tp = 0;
      std::size_t fp = 0;
      for (std::size_t idx : order) {
        std::optional<std::size_t> best;
        double best_sim = thr;
        for (std::size_t j = 0; j < gts.size(); ++j) {
          const double s = sim[idx][j];
          if (taken[j] || std::isnan(s) || s < best_sim) continue;
          if (!best || s > best_sim) {
            best = j;
            best_sim = s;
          }
        }
        if (best) {
          taken[*best] = true;
          ++tp;
        } else {
          ++fp;
        }
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
      }
      for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
      double sum = 0.0;
      for (double r : recall_thresholds) {
        const auto it = std::lower_bound(recall.begin(), recall.end(), r);
        if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
      }
      ap = sum / static_cast<double>(recall_thresholds.size());
    }
    out.ap_per_threshold.emplace_back(thr, ap);
    acc += ap;
  }
  out.mean_ap = acc / static_cast<double>(thresholds.size());
  return out;
}

// Per-category AP, then unweighted means over categories present in the GT
// or the detections.
inline EvalResult evaluate(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                           const Similarity& similarity,
                           const std::vector<double>& thresholds = coco_iou_thresholds()) {
  std::map<long long, std::pair<std::vector<Detection>, std::vector<GroundTruth>>> by_cat;
  for (const auto& g : gts) by_cat[g.category_id].second.push_back(g);
  for (const auto& d : dets) by_cat[d.category_id].first.push_back(d);
  EvalResult res;
  res.ap_per_threshold.reserve(thresholds.size());
  for (double t : thresholds) res.ap_per_threshold.emplace_back(t, 0.0);
  for (const auto& [cat, pair] : by_cat) {
    CategoryAP ap = average_precision(pair.first, pair.second, similarity, thresholds);
    for (std::size_t k = 0; k < thresholds.size(); ++k) res.ap_per_threshold[k].second += ap.ap_per_threshold[k].second;
    res.per_class.emplace(cat, std::move(ap));
  }
  if (!by_cat.empty()) {
    const double n = static_cast<double>(by_cat.size());
    double acc = 0.0;
    for (auto& [t, v] : res.ap_per_threshold) {
      v /= n;
      acc += v;
    }
    res.mean_ap = acc / static_cast<double>(thresholds.size());
  }
  return res;
}

using CountPairs = std::vector<std::pair<double, double>>;  // (predicted, ground truth)

// Per-class MSE over its images, then the unweighted mean over classes.
inline double counting_mse(const std::map<long long, CountPairs>& per_class) {
  detail::require(!per_class.empty(), "counting_mse: no classes");
  double acc = 0.0;
  for (const auto& [cls, pairs] : per_class) {
    detail::require(!pairs.empty(), "counting_mse: class " + std::to_string(cls) + " has no images");
    double se = 0.0;
    for (const auto& [pred, gt] : pairs) se += (pred - gt) * (pred - gt);
    acc += se / static_cast<double>(pairs.size());
  }
  return acc / static_cast<double>(per_class.size());
}

// Detections of `category` in `image` at or above the score threshold.
inline std::size_t predicted_count(const std::vector<Detection>& dets, long long category, long long image,
                                   double score_threshold = kDefaultCountScoreThreshold) {
  return static_cast<std::size_t>(std::count_if(dets.begin(), dets.end(), [&](const Detection& d) {
    return d.category_id == category && d.image_id == image && d.score >= score_threshold;
  }));
}

inline constexpr long long kAllClasses = -1;

// One line of the results stream.
struct MetricRecord {
  std::string scenario;  // "seen" or "unseen"
  std::string task;
  long long class_id = kAllClasses;
  long long shots = 0;
  long long seed = 0;
  std::string metric;
  double value = 0.0;

  friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

inline std::string scenario_of(TaskKind t) { return t == TaskKind::Count ? "unseen" : "seen"; }

inline nlohmann::ordered_json to_json(const MetricRecord& r) {
  nlohmann::ordered_json j;
  j["scenario"] = r.scenario;
  j["task"] = r.task;
  if (r.class_id == kAllClasses) {
    j["class"] = "all";
  } else {
    j["class"] = r.class_id;
  }
  j["K"] = r.shots;
  j["seed"] = r.seed;
  j["metric"] = r.metric;
  j["value"] = r.value;
  return j;
}

inline MetricRecord metric_record_from_json(const nlohmann::json& j) {
  MetricRecord r;
  r.scenario = j.at("scenario").get<std::string>();
  r.task = j.at("task").get<std::string>();
  const auto& c = j.at("class");
  r.class_id = c.is_string() ? kAllClasses : c.get<long long>();
  r.shots = j.at("K").get<long long>();
  r.seed = j.at("seed").get<long long>();
  r.metric = j.at("metric").get<std::string>();
  r.value = j.at("value").get<double>();
  return r;
}

// Records for one task/seed: per-class and class-averaged AP at each
// threshold plus the mean.
inline std::vector<MetricRecord> ap_records(const EvalResult& res, TaskKind task, long long shots, long long seed) {
  std::vector<MetricRecord> out;
  const std::string sc = scenario_of(task);
  const std::string tk(to_string(task));
  auto label = [](double thr) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "AP%02d", static_cast<int>(std::lround(thr * 100.0)));
    return std::string(buf);
  };
  for (const auto& [cls, ap] : res.per_class) {
    out.push_back({sc, tk, cls, shots, seed, "AP", ap.mean_ap});
    for (const auto& [thr, v] : ap.ap_per_threshold) out.push_back({sc, tk, cls, shots, seed, label(thr), v});
  }
  out.push_back({sc, tk, kAllClasses, shots, seed, "AP", res.mean_ap});
  for (const auto& [thr, v] : res.ap_per_threshold) out.push_back({sc, tk, kAllClasses, shots, seed, label(thr), v});
  return out;
}

}  // namespace pointperc
