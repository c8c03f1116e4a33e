#pragma once

// Scoring of prediction files against an annotation file: one record per
// (task, class, seed, metric), then the cross-seed aggregate.
//
// Prediction file: one JSON object per line with `image_id`, `category_id`,
// `score`, optional `seed` (default 0), optional `K`, `task`, and the
// geometry for that task: `bbox` [x,y,w,h] (detect, count), `segmentation`
// (a ring [x1,y1,...] or a list of rings, largest used), `keypoints`
// [x1,y1,v1,...] (pose), `center` [x,y] (count), or canonical `points`
// [[x,y],...] for any task.

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "pointperc/codecs.hpp"
#include "pointperc/episodes.hpp"
#include "pointperc/errors.hpp"
#include "pointperc/metrics.hpp"

namespace pointperc {

struct Prediction {
  long long seed = 0;
  std::optional<long long> shots;
  TaskKind task = TaskKind::Detect;
  Detection det;
};

namespace detail {

inline PointSequence ring_from_flat(const nlohmann::json& ring, const std::string& loc) {
  require(ring.is_array() && ring.size() % 2 == 0 && ring.size() >= 6, loc + ": segmentation ring needs >= 3 x,y pairs");
  PointSequence s;
  s.cyclic = true;
  for (std::size_t k = 0; k + 1 < ring.size(); k += 2) s.points.push_back({ring[k].get<double>(), ring[k + 1].get<double>()});
  return s;
}

inline CanonicalPointSet prediction_geometry(const nlohmann::json& j, TaskKind task, const std::string& loc) {
  if (j.contains("points")) {
    nlohmann::json tagged = j;
    tagged["task"] = std::string(to_string(task));
    CanonicalPointSet ps = point_set_from_json(tagged);
    require(ps.size() >= 1, loc + ": empty points");
    return ps;
  }
  switch (task) {
    case TaskKind::Detect:
    case TaskKind::Count: {
      if (task == TaskKind::Count && j.contains("center")) {
        const auto& c = j.at("center");
        require(c.is_array() && c.size() == 2, loc + ": center must be [x, y]");
        return {TaskKind::Count, make_open({{c[0].get<double>(), c[1].get<double>()}}), std::nullopt};
      }
      require(j.contains("bbox"), loc + ": " + std::string(to_string(task)) + " prediction needs bbox");
      const BBox b = parse_bbox(j.at("bbox"), loc);
      if (task == TaskKind::Count) return encode_center(b);
      return encode_box(b, 4);
    }
    case TaskKind::Segment: {
      require(j.contains("segmentation"), loc + ": segment prediction needs segmentation");
      const auto& seg = j.at("segmentation");
      require(seg.is_array() && !seg.empty(), loc + ": empty segmentation");
      if (!seg[0].is_array()) return {TaskKind::Segment, ring_from_flat(seg, loc), std::nullopt};
      InstanceAnnotation tmp;
      for (const auto& ring : seg) tmp.segmentation.push_back(ring_from_flat(ring, loc));
      return {TaskKind::Segment, *largest_polygon(tmp), std::nullopt};
    }
    case TaskKind::Pose: {
      require(j.contains("keypoints"), loc + ": pose prediction needs keypoints");
      const auto& kp = j.at("keypoints");
      require(kp.is_array() && !kp.empty() && kp.size() % 3 == 0, loc + ": keypoints must hold x,y,v triples");
      std::vector<Keypoint> kps;
      for (std::size_t k = 0; k + 2 < kp.size(); k += 3)
        kps.push_back({kp[k].get<double>(), kp[k + 1].get<double>(), kp[k + 2].get<double>() > 0.0});
      return encode_pose(kps);
    }
  }
  throw ValidationError(loc + ": unknown task");
}

}  // namespace detail

inline Prediction prediction_from_json(const nlohmann::json& j, const std::string& loc) {
  using detail::require;
  try {
    require(j.is_object(), loc + ": prediction must be an object");
    for (const char* key : {"task", "image_id", "category_id", "score"})
      require(j.contains(key), loc + ": missing '" + key + "'");
    Prediction p;
    p.seed = j.value("seed", 0LL);
    if (j.contains("K")) p.shots = j.at("K").get<long long>();
    p.task = parse_task(j.at("task").get<std::string>());
    p.det.image_id = j.at("image_id").get<long long>();
    p.det.category_id = j.at("category_id").get<long long>();
    p.det.score = j.at("score").get<double>();
    require(std::isfinite(p.det.score), loc + ": score is not finite");
    p.det.points = detail::prediction_geometry(j, p.task, loc);
    validate_finite(p.det.points.points);
    if (j.contains("support_visibility")) p.det.support_visibility = j.at("support_visibility").get<std::vector<bool>>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(loc + ": " + e.what());
  }
}

inline std::vector<Prediction> read_predictions(std::istream& in) {
  std::vector<Prediction> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string loc = "prediction line " + std::to_string(n);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(loc + " does not parse: " + e.what());
    }
    out.push_back(prediction_from_json(j, loc));
  }
  return out;
}

// Ground truth for one task: every annotation carrying that task's label.
inline std::vector<GroundTruth> ground_truth_for(const Dataset& ds, TaskKind task) {
  std::vector<GroundTruth> gts;
  for (const auto& a : ds.annotations) {
    if (!has_task_annotation(a, task)) continue;
    GroundTruth g;
    g.category_id = a.category_id;
    g.image_id = a.image_id;
    g.area = a.area;
    switch (task) {
      case TaskKind::Detect: g.points = encode_box(a.bbox, 4); break;
      case TaskKind::Segment: g.points = {TaskKind::Segment, *largest_polygon(a), std::nullopt}; break;
      case TaskKind::Pose: g.points = encode_pose(*a.keypoints); break;
      case TaskKind::Count: g.points = encode_center(a.bbox); break;
    }
    gts.push_back(std::move(g));
  }
  return gts;
}

inline Similarity similarity_for(TaskKind task) {
  switch (task) {
    case TaskKind::Segment: return mask_similarity();
    case TaskKind::Pose: return oks_similarity();
    default: return box_similarity();
  }
}

// Counting: per class, over every image holding the class in the ground
// truth, predicted count (score >= 0.5) against the annotated count.
inline std::vector<MetricRecord> count_records(const Dataset& ds, const std::vector<Detection>& dets, long long shots,
                                               long long seed) {
  std::map<long long, std::map<long long, double>> gt_counts;  // class -> image -> count
  for (const auto& a : ds.annotations) gt_counts[a.category_id][a.image_id] += 1.0;
  std::map<long long, CountPairs> per_class;
  for (const auto& [cls, by_image] : gt_counts)
    for (const auto& [img, n] : by_image)
      per_class[cls].emplace_back(static_cast<double>(predicted_count(dets, cls, img)), n);
  std::vector<MetricRecord> out;
  const std::string sc = scenario_of(TaskKind::Count);
  if (per_class.empty()) return out;
  for (const auto& [cls, pairs] : per_class)
    out.push_back({sc, "count", cls, shots, seed, "MSE", counting_mse({{cls, pairs}})});
  out.push_back({sc, "count", kAllClasses, shots, seed, "MSE", counting_mse(per_class)});
  return out;
}

// Worker count from POINTPERC_THREADS, else the hardware concurrency.
inline std::size_t thread_cap(const char* env) {
  if (env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    detail::require(*end == '\0' && v >= 1, std::string("POINTPERC_THREADS must be a positive integer, got '") + env + "'");
    return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(0..n-1) on up to `threads` workers; results land by index so the
// merge order never depends on scheduling. The first failure by index is rethrown.
template <typename T>
std::vector<T> parallel_map(std::size_t n, std::size_t threads, const std::function<T(std::size_t)>& fn) {
  std::vector<T> out(n);
  std::vector<std::exception_ptr> errs(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        out[i] = fn(i);
      } catch (...) {
        errs[i] = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 1; t < std::min(threads, n); ++t) pool.emplace_back(work);
    work();
  }
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
  return out;
}

struct EvaluationRequest {
  std::set<TaskKind> tasks;
  long long shots = 1;
  std::optional<std::size_t> seeds;  // expect seeds 0..n-1
  std::size_t threads = 1;
};

// Per-seed records ordered by (task, seed); classes and metrics ordered within.
inline std::vector<MetricRecord> evaluate_predictions(const Dataset& ds, const std::vector<Prediction>& preds,
                                                      const EvaluationRequest& req) {
  detail::require(!req.tasks.empty(), "no tasks to evaluate");
  std::set<long long> seeds;
  if (req.seeds) {
    detail::require(*req.seeds >= 1, "--seeds must be >= 1");
    for (std::size_t s = 0; s < *req.seeds; ++s) seeds.insert(static_cast<long long>(s));
  }
  for (const auto& p : preds) {
    if (req.seeds)
      detail::require(seeds.contains(p.seed), "prediction for seed " + std::to_string(p.seed) + " outside 0.." +
                                                  std::to_string(*req.seeds - 1));
    else
      seeds.insert(p.seed);
    if (p.shots)
      detail::require(*p.shots == req.shots, "prediction has K=" + std::to_string(*p.shots) + ", evaluating K=" +
                                                 std::to_string(req.shots));
  }
  if (seeds.empty()) seeds.insert(0);

  std::vector<std::pair<TaskKind, long long>> jobs;
  for (TaskKind t : req.tasks)
    for (long long s : seeds) jobs.emplace_back(t, s);
  std::map<TaskKind, std::vector<GroundTruth>> gts;
  for (TaskKind t : req.tasks) gts[t] = ground_truth_for(ds, t);

  const auto parts = parallel_map<std::vector<MetricRecord>>(jobs.size(), req.threads, [&](std::size_t i) {
    const auto [task, seed] = jobs[i];
    std::vector<Detection> dets;
    for (const auto& p : preds)
      if (p.task == task && p.seed == seed) dets.push_back(p.det);
    if (task == TaskKind::Count) return count_records(ds, dets, req.shots, seed);
    return ap_records(evaluate(dets, gts.at(task), similarity_for(task)), task, req.shots, seed);
  });
  std::vector<MetricRecord> out;
  for (const auto& part : parts) out.insert(out.end(), part.begin(), part.end());
  return out;
}

}  // namespace pointperc
