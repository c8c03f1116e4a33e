#pragma once

// Programmatic toy dataset (lobed blobs with boxes, contours, keypoints and
// centers) and the synthetic training example built from it, so the whole
// pipeline runs without external data.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "pointperc/codecs.hpp"
#include "pointperc/decoder.hpp"
#include "pointperc/episodes.hpp"
#include "pointperc/geometry.hpp"
#include "pointperc/random.hpp"

namespace pointperc {

struct ToyConfig {
  std::size_t images = 24;
  std::size_t categories = 5;
  long long image_size = 64;
  std::size_t contour_vertices = 48;
  double keypoint_visible_prob = 0.85;
};

// Category c has c + 2 lobes; its keypoints are the lobe tips.
inline std::size_t toy_lobes(long long category_id) { return static_cast<std::size_t>(category_id) + 2; }

inline std::set<long long> toy_novel_ids() { return {4, 5}; }

inline Dataset make_toy_dataset(std::uint64_t seed, const ToyConfig& cfg = {}) {
  Rng rng(hash_seed({seed, 0x746f79ULL}));
  Dataset ds;
  for (std::size_t c = 1; c <= cfg.categories; ++c) {
    CategoryInfo ci;
    ci.id = static_cast<long long>(c);
    ci.name = "blob" + std::to_string(toy_lobes(ci.id));
    for (std::size_t k = 0; k < toy_lobes(ci.id); ++k) ci.keypoint_names.push_back("tip" + std::to_string(k));
    ci.symmetry_pairs.push_back({1, static_cast<long long>(toy_lobes(ci.id)) - 1});
    ds.categories.push_back(std::move(ci));
  }
  const double size = static_cast<double>(cfg.image_size);
  long long next_ann = 1;
  for (std::size_t i = 0; i < cfg.images; ++i) {
    ImageInfo im{static_cast<long long>(i + 1), cfg.image_size, cfg.image_size, std::nullopt};
    const std::size_t objects = 1 + static_cast<std::size_t>(rng.below(3));
    for (std::size_t o = 0; o < objects; ++o) {
      const auto cat = static_cast<long long>(1 + rng.below(cfg.categories));
      const std::size_t lobes = toy_lobes(cat);
      const double radius = rng.uniform(0.12, 0.2) * size;
      const double amp = 0.25;
      const Point2 c{rng.uniform(radius * 1.3, size - radius * 1.3), rng.uniform(radius * 1.3, size - radius * 1.3)};
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      InstanceAnnotation a;
      a.id = next_ann++;
      a.image_id = im.id;
      a.category_id = cat;
      PointSequence poly;
      poly.cyclic = true;
      for (std::size_t v = 0; v < cfg.contour_vertices; ++v) {
        const double phi = 2.0 * std::numbers::pi * static_cast<double>(v) / static_cast<double>(cfg.contour_vertices);
        const double r = radius * (1.0 + amp * std::cos(static_cast<double>(lobes) * phi + phase));
        poly.points.push_back({c.x + r * std::cos(phi), c.y + r * std::sin(phi)});
      }
      std::vector<Keypoint> kps;
      for (std::size_t k = 0; k < lobes; ++k) {
        const double phi = (2.0 * std::numbers::pi * static_cast<double>(k) - phase) / static_cast<double>(lobes);
        const double r = radius * (1.0 + amp);
        kps.push_back({c.x + r * std::cos(phi), c.y + r * std::sin(phi), rng.uniform() < cfg.keypoint_visible_prob});
      }
      a.bbox = bbox_of(poly);
      a.center = a.bbox.center();
      a.area = std::abs(signed_area(poly));
      a.segmentation.push_back(std::move(poly));
      a.keypoints = std::move(kps);
      ds.annotations.push_back(std::move(a));
    }
    ds.images.push_back(std::move(im));
  }
  return ds;
}

inline bool point_in_polygon(const PointSequence& poly, Point2 p) {
  bool inside = false;
  const std::size_t n = poly.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Point2 a = poly[i];
    const Point2 b = poly[j];
    if ((a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x) inside = !inside;
  }
  return inside;
}

// Filled masks, intensity by category, on a zero background.
inline Image render_image(const Dataset& ds, long long image_id) {
  const ImageInfo* info = ds.find_image(image_id);
  detail::require(info != nullptr && info->width > 0 && info->height > 0,
                  "image " + std::to_string(image_id) + " has no size");
  Image img{static_cast<std::size_t>(info->width), static_cast<std::size_t>(info->height), {}};
  img.pixels.assign(img.width * img.height, 0.0);
  for (const auto& a : ds.annotations) {
    if (a.image_id != image_id) continue;
    const PointSequence* poly = largest_polygon(a);
    if (!poly) continue;
    const double value = 0.3 + 0.15 * static_cast<double>(a.category_id);
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x)
        if (point_in_polygon(*poly, {static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5}))
          img.pixels[y * img.width + x] = value;
  }
  return img;
}

inline Image crop_image(const Image& img, const CropTransform& crop) {
  Image out{static_cast<std::size_t>(crop.width), static_cast<std::size_t>(crop.height), {}};
  out.pixels.assign(out.width * out.height, 0.0);
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < out.width; ++x) {
      const auto sx = static_cast<long long>(crop.x) + static_cast<long long>(x);
      const auto sy = static_cast<long long>(crop.y) + static_cast<long long>(y);
      if (sx >= 0 && sy >= 0 && sx < static_cast<long long>(img.width) && sy < static_cast<long long>(img.height))
        out.pixels[y * out.width + x] = img.at(static_cast<std::size_t>(sx), static_cast<std::size_t>(sy));
    }
  }
  return out;
}

inline constexpr std::size_t kToyPatch = 4;
inline constexpr double kToyLearningRate = 1e-3;

// One support/query pair of the first novel toy class: a 1-shot support crop,
// and the first query instance with a jittered proposal anchor.
inline TrainSample make_toy_sample(std::uint64_t seed, TaskKind task, std::size_t channels,
                                   const EpisodeConfig& ecfg = {}) {
  detail::require(task != TaskKind::Count, "toy training covers detect, segment and pose");
  const Dataset ds = make_toy_dataset(seed);
  const Split split = make_split(ds, toy_novel_ids());
  const long long cls = *split.novel_class_ids.begin();
  const Episode ep = sample_episode(ds, split, cls, 1, static_cast<long long>(seed), {task}, ecfg);
  detail::require(!ep.query_image_ids.empty(), "toy episode has no query image");
  const SupportInstance& sup = ep.support.front();

  TrainSample s;
  s.support_grid = project_patches(crop_image(render_image(ds, sup.image_id), sup.crop), kToyPatch, channels, seed);
  s.support_points = sup.targets.at(task).points;

  const InstanceAnnotation* query = nullptr;
  for (const long long img : ep.query_image_ids) {
    for (const auto& a : ds.annotations) {
      if (a.image_id == img && a.category_id == cls && has_task_annotation(a, task)) {
        query = &a;
        break;
      }
    }
    if (query) break;
  }
  detail::require(query != nullptr, "toy episode has no usable query instance");
  s.query_grid = project_patches(render_image(ds, query->image_id), kToyPatch, channels, seed);
  s.gt_points = encode_annotation(*query, task, ecfg).points;

  Rng rng(hash_seed({seed, 0x616e63ULL}));
  const BBox b = query->bbox;
  s.anchor = {b.x + b.w / 2.0 + rng.uniform(-0.1, 0.1) * b.w, b.y + b.h / 2.0 + rng.uniform(-0.1, 0.1) * b.h,
              b.w * rng.uniform(0.9, 1.2), b.h * rng.uniform(0.9, 1.2)};
  return s;
}

}  // namespace pointperc
