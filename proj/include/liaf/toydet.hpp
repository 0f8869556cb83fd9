#pragma once

#include "liaf/nn.hpp"
#include "liaf/roi.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace liaf {

struct SceneSpec {
  int image_size = 128;
  int num_classes = 3;
  int min_instances = 1;
  int max_instances = 4;
  double min_box = 14;  // pixels, side length
  double max_box = 44;
  double noise = 0.04;
  double max_overlap_iou = 0.3;

  void validate() const;
  std::string hash() const;  // stable hex digest of all fields
};

struct GroundTruth {
  Box box;  // image pixels
  int label = 0;
};

struct SyntheticScene {
  std::vector<float> image;  // [3, H, W], values in [0, 1]
  int size = 0;
  std::vector<GroundTruth> ground_truth;
  std::uint64_t seed = 0;
};

// Filled rectangles, discs and triangles (class = shape type) in random
// colors over a smooth textured background plus pixel noise.
SyntheticScene generate_scene(std::uint64_t seed, const SceneSpec& spec);

std::uint64_t mix_seed(std::uint64_t root, std::uint64_t stream, std::uint64_t index);

// A deterministic, in-memory split of scenes. Scene i has seed
// mix_seed(root_seed, split_id, i).
struct Corpus {
  SceneSpec spec;
  std::uint64_t root_seed = 0;
  std::uint64_t split_id = 0;
  std::vector<SyntheticScene> scenes;

  static Corpus generate(const SceneSpec& spec, std::uint64_t root_seed, std::uint64_t split_id, int count);
  std::size_t size() const { return scenes.size(); }

  // Newline-delimited JSON, one record per scene.
  std::string manifest() const;
};

template <typename Scalar>
Tensor4<Scalar> stack_images(const Corpus& corpus, const std::vector<int>& indices) {
  const int s = corpus.spec.image_size;
  Tensor4<Scalar> out(static_cast<Index>(indices.size()), 3, s, s);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& img = corpus.scenes[static_cast<std::size_t>(indices[b])].image;
    for (std::size_t k = 0; k < img.size(); ++k)
      out.image_data(static_cast<Index>(b))[k] = static_cast<Scalar>(img[k]);
  }
  return out;
}

// Ground truth of a batch mapped onto a feature level. Boxes that fall
// outside the map or become degenerate are dropped with a warning.
InstanceSet instances_for_level(const std::vector<std::vector<GroundTruth>>& batch_gt, int stride, Index height,
                                Index width);

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

template <typename Scalar>
struct TaskLoss {
  Scalar total = 0;
  Scalar classification = 0;
  Scalar regression = 0;
  int positives = 0;
  Tensor4<Scalar> grad_logits;
  Tensor4<Scalar> grad_deltas;
};

namespace detail {

// Center-in-box assignment: location (y, x) is positive for the smallest
// ground-truth box containing its image-space center ((x+0.5)s, (y+0.5)s).
// Returns -1 for background.
inline int assign_location(const std::vector<GroundTruth>& gt, Index y, Index x, int stride) {
  const double cx = (static_cast<double>(x) + 0.5) * stride;
  const double cy = (static_cast<double>(y) + 0.5) * stride;
  int best = -1;
  double best_area = 0;
  for (std::size_t g = 0; g < gt.size(); ++g) {
    const auto& b = gt[g].box;
    if (cx >= b.x1 && cx < b.x2 && cy >= b.y1 && cy < b.y2 && (best < 0 || b.area() < best_area)) {
      best = static_cast<int>(g);
      best_area = b.area();
    }
  }
  return best;
}

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace detail

// Sigmoid focal classification loss over every location and class, plus L1
// on the (l, t, r, b) distances at positive locations. Both terms are
// divided by max(1, #positives) over the batch.
template <typename Scalar>
TaskLoss<Scalar> detection_task_loss(const Tensor4<Scalar>& logits, const Tensor4<Scalar>& deltas,
                                     const std::vector<std::vector<GroundTruth>>& batch_gt, int stride,
                                     const FocalParams& focal = {}) {
  const Index N = logits.n(), C = logits.c(), H = logits.h(), W = logits.w();
  if (static_cast<Index>(batch_gt.size()) != N) throw std::invalid_argument("detection_task_loss: batch size mismatch");
  if (deltas.n() != N || deltas.c() != 4 || deltas.h() != H || deltas.w() != W)
    throw std::invalid_argument("detection_task_loss: head shapes disagree");
  TaskLoss<Scalar> out;
  out.grad_logits = Tensor4<Scalar>::zeros_like(logits);
  out.grad_deltas = Tensor4<Scalar>::zeros_like(deltas);

  std::vector<int> assignment(static_cast<std::size_t>(N * H * W));
  for (Index n = 0; n < N; ++n)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        const int a = detail::assign_location(batch_gt[static_cast<std::size_t>(n)], y, x, stride);
        assignment[static_cast<std::size_t>((n * H + y) * W + x)] = a;
        out.positives += a >= 0;
      }
  const double norm = std::max(1, out.positives);
  const double alpha = focal.alpha, gamma = focal.gamma;

  double cls = 0, reg = 0;
  for (Index n = 0; n < N; ++n) {
    const auto& gt = batch_gt[static_cast<std::size_t>(n)];
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        const int a = assignment[static_cast<std::size_t>((n * H + y) * W + x)];
        for (Index c = 0; c < C; ++c) {
          const double z = logits(n, c, y, x);
          const double p = 1.0 / (1.0 + std::exp(-z));
          double loss, grad;
          if (a >= 0 && gt[static_cast<std::size_t>(a)].label == c) {
            const double log_p = -detail::softplus(-z);
            const double q = std::pow(1.0 - p, gamma);
            loss = -alpha * q * log_p;
            grad = alpha * q * (gamma * p * log_p - (1.0 - p));
          } else {
            const double log_1mp = -detail::softplus(z);
            const double q = std::pow(p, gamma);
            loss = -(1.0 - alpha) * q * log_1mp;
            grad = (1.0 - alpha) * q * (p - gamma * (1.0 - p) * log_1mp);
          }
          cls += loss;
          out.grad_logits(n, c, y, x) = static_cast<Scalar>(grad / norm);
        }
        if (a < 0) continue;
        const auto& b = gt[static_cast<std::size_t>(a)].box;
        const double cx = (static_cast<double>(x) + 0.5) * stride;
        const double cy = (static_cast<double>(y) + 0.5) * stride;
        const double target[4] = {(cx - b.x1) / stride, (cy - b.y1) / stride, (b.x2 - cx) / stride,
                                  (b.y2 - cy) / stride};
        for (int k = 0; k < 4; ++k) {
          const double r = static_cast<double>(deltas(n, k, y, x)) - target[k];
          reg += std::abs(r);
          out.grad_deltas(n, k, y, x) = static_cast<Scalar>((r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0)) / norm);
        }
      }
  }
  out.classification = static_cast<Scalar>(cls / norm);
  out.regression = static_cast<Scalar>(reg / norm);
  out.total = static_cast<Scalar>((cls + reg) / norm);
  return out;
}

struct Detection {
  int image = 0;
  int label = 0;
  double score = 0;
  Box box;
};

struct DecodeParams {
  double score_threshold = 0.05;
  int pre_nms_top_k = 200;
  double nms_iou = 0.5;
  int max_per_image = 50;
};

// Greedy per-class NMS over one image's candidates (sorted internally).
std::vector<Detection> nms(std::vector<Detection> candidates, double iou_threshold, int keep);

template <typename Scalar>
std::vector<Detection> decode_detections(const Tensor4<Scalar>& logits, const Tensor4<Scalar>& deltas, int stride,
                                         double image_size, int first_image_index = 0, const DecodeParams& p = {}) {
  std::vector<Detection> all;
  for (Index n = 0; n < logits.n(); ++n) {
    std::vector<Detection> cands;
    for (Index y = 0; y < logits.h(); ++y)
      for (Index x = 0; x < logits.w(); ++x)
        for (Index c = 0; c < logits.c(); ++c) {
          const double score = 1.0 / (1.0 + std::exp(-static_cast<double>(logits(n, c, y, x))));
          if (score < p.score_threshold) continue;
          const double cx = (static_cast<double>(x) + 0.5) * stride;
          const double cy = (static_cast<double>(y) + 0.5) * stride;
          Box b{cx - std::max(0.0, static_cast<double>(deltas(n, 0, y, x))) * stride,
                cy - std::max(0.0, static_cast<double>(deltas(n, 1, y, x))) * stride,
                cx + std::max(0.0, static_cast<double>(deltas(n, 2, y, x))) * stride,
                cy + std::max(0.0, static_cast<double>(deltas(n, 3, y, x))) * stride};
          b.x1 = std::clamp(b.x1, 0.0, image_size);
          b.y1 = std::clamp(b.y1, 0.0, image_size);
          b.x2 = std::clamp(b.x2, 0.0, image_size);
          b.y2 = std::clamp(b.y2, 0.0, image_size);
          if (b.area() <= 0) continue;
          cands.push_back({first_image_index + static_cast<int>(n), static_cast<int>(c), score, b});
        }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (static_cast<int>(cands.size()) > p.pre_nms_top_k) cands.resize(static_cast<std::size_t>(p.pre_nms_top_k));
    auto kept = nms(std::move(cands), p.nms_iou, p.max_per_image);
    all.insert(all.end(), kept.begin(), kept.end());
  }
  return all;
}

struct MapMetrics {
  double map = 0;   // mean over classes and IoU 0.50:0.05:0.95
  double ap50 = 0;
  double ap75 = 0;
  int classes_evaluated = 0;
  std::vector<double> per_class_ap;  // averaged over thresholds; -1 when the class has no ground truth
};

// Average precision for one class at one IoU threshold: greedy matching in
// descending score order (ties broken by image, then box coordinates), each
// ground truth matched at most once, all-point interpolated PR area.
double average_precision(const std::vector<Detection>& predictions, const std::vector<std::vector<GroundTruth>>& gt,
                         int label, double iou_threshold);

MapMetrics evaluate_map(const std::vector<Detection>& predictions, const std::vector<std::vector<GroundTruth>>& gt,
                        int num_classes);

}  // namespace liaf
