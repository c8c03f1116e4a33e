#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pointperc/codecs.hpp"
#include "pointperc/errors.hpp"
#include "pointperc/geometry.hpp"
#include "pointperc/metrics.hpp"
#include "pointperc/random.hpp"

namespace pointperc {

struct ImageInfo {
  long long id = 0;
  long long width = 0;
  long long height = 0;
  std::optional<std::string> file_name;

  friend bool operator==(const ImageInfo&, const ImageInfo&) = default;
};

struct CategoryInfo {
  long long id = 0;
  std::string name;
  std::vector<std::string> keypoint_names;
  std::vector<std::pair<long long, long long>> symmetry_pairs;

  friend bool operator==(const CategoryInfo&, const CategoryInfo&) = default;
};

struct InstanceAnnotation {
  long long id = 0;
  long long image_id = 0;
  long long category_id = 0;
  BBox bbox;
  std::vector<PointSequence> segmentation;
  std::optional<std::vector<Keypoint>> keypoints;
  Point2 center;  // always the bbox midpoint
  double area = 0.0;

  friend bool operator==(const InstanceAnnotation&, const InstanceAnnotation&) = default;
};

struct Dataset {
  std::vector<ImageInfo> images;
  std::vector<InstanceAnnotation> annotations;
  std::vector<CategoryInfo> categories;

  const ImageInfo* find_image(long long id) const {
    for (const auto& im : images)
      if (im.id == id) return &im;
    return nullptr;
  }
  const CategoryInfo* find_category(long long id) const {
    for (const auto& c : categories)
      if (c.id == id) return &c;
    return nullptr;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Largest-area ring of a multi-polygon mask.
inline const PointSequence* largest_polygon(const InstanceAnnotation& a) {
  const PointSequence* best = nullptr;
  double best_area = 0.0;
  for (const auto& poly : a.segmentation) {
    if (poly.size() < 3) continue;
    const double ar = std::abs(signed_area(poly));
    if (!best || ar > best_area) {
      best = &poly;
      best_area = ar;
    }
  }
  return best;
}

namespace detail {

inline std::string where(const char* kind, std::size_t index) {
  return std::string(kind) + "[" + std::to_string(index) + "]";
}

inline BBox parse_bbox(const nlohmann::json& j, const std::string& loc) {
  require(j.is_array() && j.size() == 4, loc + ".bbox must be [x,y,w,h]");
  BBox b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  require(b.w >= 0.0 && b.h >= 0.0, loc + ".bbox has negative size");
  require(std::isfinite(b.x) && std::isfinite(b.y) && std::isfinite(b.w) && std::isfinite(b.h),
          loc + ".bbox is not finite");
  return b;
}

}  // namespace detail

// Parses the detection-annotation schema: top-level `images`, `annotations`,
// `categories`; bbox [x,y,w,h]; segmentation [[x1,y1,...],...]; keypoints
// [x1,y1,v1,...] with v > 0 meaning labelled.
inline Dataset dataset_from_json(const nlohmann::json& root) {
  using detail::require;
  using detail::where;
  Dataset ds;
  try {
    require(root.is_object(), "annotation document must be an object");
    for (const char* key : {"images", "annotations", "categories"})
      require(root.contains(key) && root.at(key).is_array(), std::string("missing top-level array '") + key + "'");

    const auto& cats = root.at("categories");
    for (std::size_t i = 0; i < cats.size(); ++i) {
      const auto& c = cats[i];
      const std::string loc = where("categories", i);
      require(c.contains("id"), loc + " missing id");
      CategoryInfo ci;
      ci.id = c.at("id").get<long long>();
      ci.name = c.value("name", std::string{});
      const char* kp_key = c.contains("keypoint_names") ? "keypoint_names" : "keypoints";
      if (c.contains(kp_key)) ci.keypoint_names = c.at(kp_key).get<std::vector<std::string>>();
      if (c.contains("symmetry_pairs"))
        ci.symmetry_pairs = c.at("symmetry_pairs").get<std::vector<std::pair<long long, long long>>>();
      require(ds.find_category(ci.id) == nullptr, loc + " duplicate category id " + std::to_string(ci.id));
      ds.categories.push_back(std::move(ci));
    }

    const auto& imgs = root.at("images");
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      const auto& im = imgs[i];
      const std::string loc = where("images", i);
      require(im.contains("id"), loc + " missing id");
      ImageInfo info;
      info.id = im.at("id").get<long long>();
      info.width = im.value("width", 0LL);
      info.height = im.value("height", 0LL);
      if (im.contains("file_name")) info.file_name = im.at("file_name").get<std::string>();
      require(ds.find_image(info.id) == nullptr, loc + " duplicate image id " + std::to_string(info.id));
      ds.images.push_back(std::move(info));
    }

    const auto& anns = root.at("annotations");
    std::set<long long> seen_ids;
    for (std::size_t i = 0; i < anns.size(); ++i) {
      const auto& a = anns[i];
      const std::string loc = where("annotations", i);
      for (const char* key : {"image_id", "category_id", "bbox"})
        require(a.contains(key), loc + " missing '" + key + "'");
      InstanceAnnotation ann;
      ann.id = a.value("id", static_cast<long long>(i + 1));
      require(seen_ids.insert(ann.id).second, loc + " duplicate annotation id " + std::to_string(ann.id));
      ann.image_id = a.at("image_id").get<long long>();
      ann.category_id = a.at("category_id").get<long long>();
      require(ds.find_image(ann.image_id) != nullptr,
              loc + " references missing image_id " + std::to_string(ann.image_id));
      const CategoryInfo* cat = ds.find_category(ann.category_id);
      require(cat != nullptr, loc + " references missing category_id " + std::to_string(ann.category_id));
      ann.bbox = detail::parse_bbox(a.at("bbox"), loc);
      ann.center = ann.bbox.center();
      if (a.contains("segmentation") && a.at("segmentation").is_array()) {
        for (const auto& ring : a.at("segmentation")) {
          require(ring.is_array() && ring.size() % 2 == 0, loc + ".segmentation ring must hold x,y pairs");
          PointSequence poly;
          poly.cyclic = true;
          for (std::size_t k = 0; k + 1 < ring.size(); k += 2)
            poly.points.push_back({ring[k].get<double>(), ring[k + 1].get<double>()});
          validate_finite(poly);
          ann.segmentation.push_back(std::move(poly));
        }
      }
      if (a.contains("keypoints") && a.at("keypoints").is_array() && !a.at("keypoints").empty()) {
        const auto& kp = a.at("keypoints");
        require(kp.size() % 3 == 0, loc + ".keypoints must hold x,y,v triples");
        std::vector<Keypoint> kps;
        for (std::size_t k = 0; k + 2 < kp.size(); k += 3)
          kps.push_back({kp[k].get<double>(), kp[k + 1].get<double>(), kp[k + 2].get<double>() > 0.0});
        require(cat->keypoint_names.empty() || kps.size() == cat->keypoint_names.size(),
                loc + " has " + std::to_string(kps.size()) + " keypoints, category defines " +
                    std::to_string(cat->keypoint_names.size()));
        ann.keypoints = std::move(kps);
      }
      if (a.contains("area")) {
        ann.area = a.at("area").get<double>();
      } else if (const PointSequence* poly = largest_polygon(ann)) {
        ann.area = std::abs(signed_area(*poly));
      } else {
        ann.area = ann.bbox.area();
      }
      require(ann.area >= 0.0, loc + " has negative area");
      ds.annotations.push_back(std::move(ann));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("annotation schema error: ") + e.what());
  }
  return ds;
}

inline nlohmann::ordered_json dataset_to_json(const Dataset& ds) {
  nlohmann::ordered_json root;
  root["images"] = nlohmann::ordered_json::array();
  for (const auto& im : ds.images) {
    nlohmann::ordered_json j;
    j["id"] = im.id;
    j["width"] = im.width;
    j["height"] = im.height;
    if (im.file_name) j["file_name"] = *im.file_name;
    root["images"].push_back(std::move(j));
  }
  root["annotations"] = nlohmann::ordered_json::array();
  for (const auto& a : ds.annotations) {
    nlohmann::ordered_json j;
    j["id"] = a.id;
    j["image_id"] = a.image_id;
    j["category_id"] = a.category_id;
    j["bbox"] = {a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h};
    auto seg = nlohmann::ordered_json::array();
    for (const auto& poly : a.segmentation) {
      auto ring = nlohmann::ordered_json::array();
      for (const Point2& p : poly.points) {
        ring.push_back(p.x);
        ring.push_back(p.y);
      }
      seg.push_back(std::move(ring));
    }
    j["segmentation"] = std::move(seg);
    if (a.keypoints) {
      auto kp = nlohmann::ordered_json::array();
      for (const Keypoint& k : *a.keypoints) {
        kp.push_back(k.x);
        kp.push_back(k.y);
        kp.push_back(k.visible ? 2 : 0);
      }
      j["keypoints"] = std::move(kp);
    }
    j["area"] = a.area;
    root["annotations"].push_back(std::move(j));
  }
  root["categories"] = nlohmann::ordered_json::array();
  for (const auto& c : ds.categories) {
    nlohmann::ordered_json j;
    j["id"] = c.id;
    j["name"] = c.name;
    if (!c.keypoint_names.empty()) j["keypoint_names"] = c.keypoint_names;
    if (!c.symmetry_pairs.empty()) j["symmetry_pairs"] = c.symmetry_pairs;
    root["categories"].push_back(std::move(j));
  }
  return root;
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open annotation file " + path);
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("annotation file " + path + " does not parse: " + e.what());
  }
  return dataset_from_json(root);
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  out << dataset_to_json(ds).dump() << '\n';
}

// COCO ids of the 20 categories shared with PASCAL VOC.
inline const std::set<long long>& voc_overlap_novel_ids() {
  static const std::set<long long> ids{1, 2, 3, 4, 5, 6, 7, 9, 16, 17, 18, 19, 20, 21, 44, 62, 63, 64, 67, 72};
  return ids;
}

// Reads {"novel_category_ids": [...]}.
inline std::set<long long> load_novel_ids(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open split config " + path);
  try {
    const auto j = nlohmann::json::parse(in);
    const auto v = j.at("novel_category_ids").get<std::vector<long long>>();
    return {v.begin(), v.end()};
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad split config " + path + ": " + e.what());
  }
}

struct Split {
  std::set<long long> base_class_ids;
  std::set<long long> novel_class_ids;

  friend bool operator==(const Split&, const Split&) = default;
};

inline Split make_split(const Dataset& ds, const std::set<long long>& novel_ids) {
  Split s;
  for (long long id : novel_ids)
    detail::require(ds.find_category(id) != nullptr, "unknown novel category id " + std::to_string(id));
  s.novel_class_ids = novel_ids;
  for (const auto& c : ds.categories)
    if (!novel_ids.contains(c.id)) s.base_class_ids.insert(c.id);
  return s;
}

// Integer-origin crop; the point map is a pure translation. It inverts
// exactly for coordinates on a 1/2^k pixel grid (all annotation files seen so
// far) and to within one ulp otherwise.
struct CropTransform {
  double x = 0.0;
  double y = 0.0;
  double width = 0.0;
  double height = 0.0;

  Point2 to_crop(Point2 p) const { return {p.x - x, p.y - y}; }
  Point2 to_image(Point2 p) const { return {p.x + x, p.y + y}; }
  friend bool operator==(const CropTransform&, const CropTransform&) = default;
};

// bbox grown by `margin` of its size on each side, snapped outward to whole
// pixels and clipped to the image when its size is known.
inline CropTransform support_crop(const BBox& b, double margin, const ImageInfo* img) {
  double x0 = std::floor(b.x - margin * b.w);
  double y0 = std::floor(b.y - margin * b.h);
  double x1 = std::ceil(b.x + b.w + margin * b.w);
  double y1 = std::ceil(b.y + b.h + margin * b.h);
  if (img && img->width > 0 && img->height > 0) {
    x0 = std::max(x0, 0.0);
    y0 = std::max(y0, 0.0);
    x1 = std::min(x1, static_cast<double>(img->width));
    y1 = std::min(y1, static_cast<double>(img->height));
  }
  return {x0, y0, std::max(0.0, x1 - x0), std::max(0.0, y1 - y0)};
}

struct EpisodeConfig {
  double crop_margin = 0.1;
  std::size_t box_points = kDefaultBoxPoints;
  std::size_t mask_points = kDefaultMaskPoints;
};

struct SupportInstance {
  long long annotation_id = 0;
  long long image_id = 0;
  CropTransform crop;
  std::map<TaskKind, CanonicalPointSet> targets;  // crop coordinates

  friend bool operator==(const SupportInstance&, const SupportInstance&) = default;
};

struct Episode {
  long long class_id = 0;
  std::size_t shots = 0;
  long long seed = 0;
  std::set<TaskKind> tasks;
  std::vector<SupportInstance> support;
  std::vector<long long> query_image_ids;

  friend bool operator==(const Episode&, const Episode&) = default;
};

inline bool has_task_annotation(const InstanceAnnotation& a, TaskKind t) {
  switch (t) {
    case TaskKind::Detect:
    case TaskKind::Count: return a.bbox.w > 0.0 && a.bbox.h > 0.0;
    case TaskKind::Segment: {
      const PointSequence* p = largest_polygon(a);
      return p != nullptr && signed_area(*p) != 0.0;
    }
    case TaskKind::Pose:
      return a.keypoints && std::any_of(a.keypoints->begin(), a.keypoints->end(), [](const Keypoint& k) {
               return k.visible;
             });
  }
  return false;
}

// Canonical point set of one annotation for one task, in the frame given by `shift`.
inline CanonicalPointSet encode_annotation(const InstanceAnnotation& a, TaskKind t, const EpisodeConfig& cfg,
                                           Point2 shift = {}) {
  switch (t) {
    case TaskKind::Detect:
      return encode_box({a.bbox.x - shift.x, a.bbox.y - shift.y, a.bbox.w, a.bbox.h}, cfg.box_points);
    case TaskKind::Count: return encode_center({a.bbox.x - shift.x, a.bbox.y - shift.y, a.bbox.w, a.bbox.h});
    case TaskKind::Segment: {
      const PointSequence* poly = largest_polygon(a);
      detail::require(poly != nullptr, "annotation " + std::to_string(a.id) + " has no polygon");
      PointSequence moved = *poly;
      for (Point2& p : moved.points) p = p - shift;
      return encode_mask(moved, cfg.mask_points);
    }
    case TaskKind::Pose: {
      detail::require(a.keypoints.has_value(), "annotation " + std::to_string(a.id) + " has no keypoints");
      std::vector<Keypoint> kps = *a.keypoints;
      for (Keypoint& k : kps) {
        k.x -= shift.x;
        k.y -= shift.y;
      }
      return encode_pose(kps);
    }
  }
  throw ValidationError("unknown task");
}

// K supports drawn without replacement by a generator seeded from
// (class_id, K, seed); queries are the remaining images holding the class.
inline Episode sample_episode(const Dataset& ds, const Split& split, long long class_id, std::size_t shots,
                              long long seed, const std::set<TaskKind>& tasks, const EpisodeConfig& cfg = {}) {
  detail::require(split.novel_class_ids.contains(class_id),
                  "class " + std::to_string(class_id) + " is not a novel class");
  detail::require(shots >= 1, "K must be >= 1");
  detail::require(!tasks.empty(), "no tasks requested");

  std::vector<const InstanceAnnotation*> eligible;
  for (const auto& a : ds.annotations) {
    if (a.category_id != class_id) continue;
    if (std::all_of(tasks.begin(), tasks.end(), [&](TaskKind t) { return has_task_annotation(a, t); }))
      eligible.push_back(&a);
  }
  std::sort(eligible.begin(), eligible.end(), [](auto* l, auto* r) { return l->id < r->id; });
  if (eligible.size() < shots)
    throw ValidationError("class " + std::to_string(class_id) + " has " + std::to_string(eligible.size()) +
                          " instances annotated for the requested tasks, need " + std::to_string(shots));

  Rng rng(hash_seed({static_cast<std::uint64_t>(class_id), static_cast<std::uint64_t>(shots),
                     static_cast<std::uint64_t>(seed)}));
  rng.shuffle(eligible);
  eligible.resize(shots);
  std::sort(eligible.begin(), eligible.end(), [](auto* l, auto* r) { return l->id < r->id; });

  Episode ep;
  ep.class_id = class_id;
  ep.shots = shots;
  ep.seed = seed;
  ep.tasks = tasks;
  std::set<long long> support_images;
  for (const InstanceAnnotation* a : eligible) {
    SupportInstance s;
    s.annotation_id = a->id;
    s.image_id = a->image_id;
    s.crop = support_crop(a->bbox, cfg.crop_margin, ds.find_image(a->image_id));
    for (TaskKind t : tasks) s.targets.emplace(t, encode_annotation(*a, t, cfg, {s.crop.x, s.crop.y}));
    support_images.insert(a->image_id);
    ep.support.push_back(std::move(s));
  }
  std::set<long long> queries;
  for (const auto& a : ds.annotations)
    if (a.category_id == class_id && !support_images.contains(a.image_id)) queries.insert(a.image_id);
  ep.query_image_ids.assign(queries.begin(), queries.end());
  return ep;
}

inline nlohmann::ordered_json to_json(const Episode& ep) {
  nlohmann::ordered_json j;
  j["class_id"] = ep.class_id;
  j["K"] = ep.shots;
  j["seed"] = ep.seed;
  auto tasks = nlohmann::ordered_json::array();
  for (TaskKind t : ep.tasks) tasks.push_back(std::string(to_string(t)));
  j["tasks"] = std::move(tasks);
  auto sup = nlohmann::ordered_json::array();
  for (const auto& s : ep.support) {
    nlohmann::ordered_json sj;
    sj["annotation_id"] = s.annotation_id;
    sj["image_id"] = s.image_id;
    sj["crop"] = {s.crop.x, s.crop.y, s.crop.width, s.crop.height};
    sup.push_back(std::move(sj));
  }
  j["support"] = std::move(sup);
  j["queries"] = ep.query_image_ids;
  return j;
}

inline std::string episode_manifest_line(const Episode& ep) { return to_json(ep).dump(); }

struct AggregateRecord {
  std::string scenario;
  std::string task;
  long long class_id = kAllClasses;
  long long shots = 0;
  std::string metric;
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t seeds = 0;

  friend bool operator==(const AggregateRecord&, const AggregateRecord&) = default;
};

// Mean and sample standard deviation per (scenario, task, class, K, metric)
// across seeds. Every seed must report the same key set.
inline std::vector<AggregateRecord> aggregate_over_seeds(const std::vector<MetricRecord>& records) {
  detail::require(!records.empty(), "no records to aggregate");
  using Key = std::tuple<std::string, std::string, long long, long long, std::string>;
  std::map<Key, std::map<long long, double>> grouped;
  std::map<long long, std::set<Key>> keys_by_seed;
  for (const auto& r : records) {
    const Key k{r.scenario, r.task, r.class_id, r.shots, r.metric};
    detail::require(grouped[k].emplace(r.seed, r.value).second,
                    "duplicate record for seed " + std::to_string(r.seed) + " metric " + r.metric);
    keys_by_seed[r.seed].insert(k);
  }
  const auto& reference = keys_by_seed.begin()->second;
  for (const auto& [seed, keys] : keys_by_seed)
    detail::require(keys == reference, "inconsistent metric keys for seed " + std::to_string(seed));

  std::vector<AggregateRecord> out;
  for (const auto& [k, by_seed] : grouped) {
    const double n = static_cast<double>(by_seed.size());
    double sum = 0.0;
    for (const auto& [s, v] : by_seed) sum += v;
    const double mean = sum / n;
    double ss = 0.0;
    for (const auto& [s, v] : by_seed) ss += (v - mean) * (v - mean);
    const double sd = by_seed.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    out.push_back({std::get<0>(k), std::get<1>(k), std::get<2>(k), std::get<3>(k), std::get<4>(k), mean, sd,
                   by_seed.size()});
  }
  return out;
}

inline nlohmann::ordered_json to_json(const AggregateRecord& r) {
  nlohmann::ordered_json j;
  j["scenario"] = r.scenario;
  j["task"] = r.task;
  if (r.class_id == kAllClasses) {
    j["class"] = "all";
  } else {
    j["class"] = r.class_id;
  }
  j["K"] = r.shots;
  j["seed"] = "mean";
  j["metric"] = r.metric;
  j["value"] = r.mean;
  j["stddev"] = r.stddev;
  j["seeds"] = r.seeds;
  return j;
}

}  // namespace pointperc
