#include "liaf/toydet.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>
#include <tuple>

namespace liaf {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

bool inside_shape(int label, const Box& b, double x, double y) {
  switch (label) {
    case 0:
      return x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
    case 1: {
      const double rx = b.width() / 2, ry = b.height() / 2;
      const double dx = (x - (b.x1 + rx)) / rx, dy = (y - (b.y1 + ry)) / ry;
      return dx * dx + dy * dy <= 1.0;
    }
    default: {
      // Upward isosceles triangle: apex at top center, base on the bottom edge.
      if (y < b.y1 || y >= b.y2) return false;
      const double t = (y - b.y1) / b.height();
      return std::abs(x - (b.x1 + b.x2) / 2) <= t * b.width() / 2;
    }
  }
}

}  // namespace

void SceneSpec::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("SceneSpec: " + m); };
  if (image_size < 16) fail("image_size must be >= 16");
  if (num_classes < 1 || num_classes > 3) fail("num_classes must be in [1, 3] (rectangle, disc, triangle)");
  if (min_instances < 0 || max_instances < min_instances) fail("instance count range invalid");
  if (!(min_box >= 2 && max_box >= min_box && max_box <= image_size)) fail("box size range invalid");
  if (noise < 0) fail("noise must be >= 0");
  if (max_overlap_iou < 0 || max_overlap_iou > 1) fail("max_overlap_iou must be in [0, 1]");
}

std::string SceneSpec::hash() const {
  const nlohmann::json j{{"image_size", image_size}, {"num_classes", num_classes}, {"min_instances", min_instances},
                         {"max_instances", max_instances}, {"min_box", min_box}, {"max_box", max_box},
                         {"noise", noise}, {"max_overlap_iou", max_overlap_iou}};
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t mix_seed(std::uint64_t root, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(root ^ splitmix64(stream)) + index);
}

SyntheticScene generate_scene(std::uint64_t seed, const SceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int S = spec.image_size;

  SyntheticScene scene;
  scene.seed = seed;
  scene.size = S;
  scene.image.assign(static_cast<std::size_t>(3 * S * S), 0.0f);

  double base[3], amp[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = 0.25 + 0.5 * unit(rng);
    amp[c] = 0.04 + 0.06 * unit(rng);
  }
  const double fx = 2 * kPi * (1 + 3 * unit(rng)) / S;
  const double fy = 2 * kPi * (1 + 3 * unit(rng)) / S;
  const double phase = 2 * kPi * unit(rng);

  const int count = spec.min_instances +
                    static_cast<int>(std::floor(unit(rng) * (spec.max_instances - spec.min_instances + 1)));
  std::vector<std::array<double, 3>> colors;
  for (int i = 0; i < count; ++i) {
    GroundTruth g;
    g.label = std::min(spec.num_classes - 1, static_cast<int>(std::floor(unit(rng) * spec.num_classes)));
    bool placed = false;
    for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
      const double w = spec.min_box + unit(rng) * (spec.max_box - spec.min_box);
      const double h = std::clamp(w * (0.7 + 0.6 * unit(rng)), spec.min_box, spec.max_box);
      const double x1 = std::floor(unit(rng) * (S - w));
      const double y1 = std::floor(unit(rng) * (S - h));
      g.box = Box{x1, y1, std::min<double>(S, std::round(x1 + w)), std::min<double>(S, std::round(y1 + h))};
      placed = std::none_of(scene.ground_truth.begin(), scene.ground_truth.end(),
                            [&](const GroundTruth& o) { return iou(o.box, g.box) > spec.max_overlap_iou; });
    }
    if (!placed) continue;
    std::array<double, 3> col{};
    do {
      for (auto& v : col) v = unit(rng);
    } while ((std::abs(col[0] - base[0]) + std::abs(col[1] - base[1]) + std::abs(col[2] - base[2])) / 3 < 0.25);
    colors.push_back(col);
    scene.ground_truth.push_back(g);
  }

  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      double px[3];
      const double tex = std::sin(fx * x + fy * y + phase);
      for (int c = 0; c < 3; ++c) px[c] = base[c] + amp[c] * tex;
      for (std::size_t i = 0; i < scene.ground_truth.size(); ++i)
        if (inside_shape(scene.ground_truth[i].label, scene.ground_truth[i].box, x + 0.5, y + 0.5))
          for (int c = 0; c < 3; ++c) px[c] = colors[i][static_cast<std::size_t>(c)];
      for (int c = 0; c < 3; ++c)
        scene.image[static_cast<std::size_t>((c * S + y) * S + x)] =
            static_cast<float>(std::clamp(px[c] + spec.noise * gauss(rng), 0.0, 1.0));
    }
  return scene;
}

Corpus Corpus::generate(const SceneSpec& spec, std::uint64_t root_seed, std::uint64_t split_id, int count) {
  if (count < 0) throw std::invalid_argument("Corpus: negative scene count");
  Corpus c;
  c.spec = spec;
  c.root_seed = root_seed;
  c.split_id = split_id;
  c.scenes.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    c.scenes.push_back(generate_scene(mix_seed(root_seed, split_id, static_cast<std::uint64_t>(i)), spec));
  return c;
}

std::string Corpus::manifest() const {
  std::ostringstream os;
  const auto spec_hash = spec.hash();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& g : scenes[i].ground_truth) boxes.push_back({g.box.x1, g.box.y1, g.box.x2, g.box.y2, g.label});
    const nlohmann::json rec{{"index", i}, {"seed", scenes[i].seed}, {"split", split_id}, {"spec_hash", spec_hash},
                             {"boxes", boxes}};
    os << rec.dump() << '\n';
  }
  return os.str();
}

InstanceSet instances_for_level(const std::vector<std::vector<GroundTruth>>& batch_gt, int stride, Index height,
                                Index width) {
  InstanceSet set;
  for (std::size_t b = 0; b < batch_gt.size(); ++b)
    for (const auto& g : batch_gt[b]) {
      try {
        const auto scaled = clip_and_scale_box(g.box, stride, height, width);
        if (scaled.degenerate) {
          spdlog::warn("dropping degenerate instance in image {} (label {})", b, g.label);
          continue;
        }
        set.items.push_back({scaled.box, static_cast<int>(b), g.label});
      } catch (const std::invalid_argument& e) {
        spdlog::warn("dropping instance in image {}: {}", b, e.what());
      }
    }
  return set;
}

std::vector<Detection> nms(std::vector<Detection> candidates, double iou_threshold, int keep) {
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& d : candidates) {
    if (static_cast<int>(kept.size()) >= keep) break;
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.label == d.label && iou(k.box, d.box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

double average_precision(const std::vector<Detection>& predictions, const std::vector<std::vector<GroundTruth>>& gt,
                         int label, double iou_threshold) {
  int positives = 0;
  std::vector<std::vector<bool>> matched(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    matched[i].assign(gt[i].size(), false);
    for (const auto& g : gt[i]) positives += g.label == label;
  }
  if (positives == 0) return 0.0;

  std::vector<const Detection*> preds;
  for (const auto& d : predictions)
    if (d.label == label) preds.push_back(&d);
  // Content-based tie break keeps the result independent of input order.
  std::sort(preds.begin(), preds.end(), [](const Detection* a, const Detection* b) {
    return std::make_tuple(-a->score, a->image, a->box.x1, a->box.y1, a->box.x2, a->box.y2) <
           std::make_tuple(-b->score, b->image, b->box.x1, b->box.y1, b->box.x2, b->box.y2);
  });

  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (const auto* d : preds) {
    int best = -1;
    double best_iou = iou_threshold;
    if (d->image >= 0 && static_cast<std::size_t>(d->image) < gt.size()) {
      const auto& img = gt[static_cast<std::size_t>(d->image)];
      for (std::size_t g = 0; g < img.size(); ++g) {
        if (img[g].label != label || matched[static_cast<std::size_t>(d->image)][g]) continue;
        const double v = iou(d->box, img[g].box);
        if (v >= best_iou) {
          best_iou = v;
          best = static_cast<int>(g);
        }
      }
    }
    if (best >= 0) {
      matched[static_cast<std::size_t>(d->image)][static_cast<std::size_t>(best)] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / positives);
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0, prev_recall = 0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

MapMetrics evaluate_map(const std::vector<Detection>& predictions, const std::vector<std::vector<GroundTruth>>& gt,
                        int num_classes) {
  MapMetrics m;
  m.per_class_ap.assign(static_cast<std::size_t>(num_classes), -1.0);
  for (int c = 0; c < num_classes; ++c) {
    bool has_gt = false;
    for (const auto& img : gt)
      for (const auto& g : img) has_gt = has_gt || g.label == c;
    if (!has_gt) continue;
    double sum = 0;
    for (int t = 0; t < 10; ++t) {
      const double thr = (50.0 + 5.0 * t) / 100.0;
      const double ap = average_precision(predictions, gt, c, thr);
      sum += ap;
      if (t == 0) m.ap50 += ap;
      if (t == 5) m.ap75 += ap;
    }
    m.per_class_ap[static_cast<std::size_t>(c)] = sum / 10;
    m.map += sum / 10;
    ++m.classes_evaluated;
  }
  if (m.classes_evaluated > 0) {
    m.map /= m.classes_evaluated;
    m.ap50 /= m.classes_evaluated;
    m.ap75 /= m.classes_evaluated;
  }
  return m;
}

}  // namespace liaf
