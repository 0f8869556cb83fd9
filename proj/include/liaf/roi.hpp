#pragma once

#include "liaf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace liaf {

// Axis-aligned rectangle, continuous coordinates, half-open [x1, x2) x [y1, y2).
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool operator==(const Box&) const = default;
};

double iou(const Box& a, const Box& b);

struct ScaledBox {
  Box box;
  bool degenerate = false;  // clipped area below min_area; caller should drop it
};

// Image-pixel box -> feature-map box: divide by stride, clip to [0,W]x[0,H].
// Throws std::invalid_argument for stride < 1, non-positive input area, or a
// box that lies entirely outside the map.
ScaledBox clip_and_scale_box(const Box& image_box, int stride, Index height, Index width, double min_area = 1e-6);

struct Instance {
  Box box;  // feature-map coordinates
  int batch_index = 0;
  int label = 0;
};

struct InstanceSet {
  std::vector<Instance> items;

  Index count() const { return static_cast<Index>(items.size()); }
  bool empty() const { return items.empty(); }
  const Instance& operator[](Index i) const { return items[static_cast<std::size_t>(i)]; }

  // Checks box bounds and batch indices against a map of the given shape.
  void validate(Index n, Index height, Index width) const;
};

template <typename Scalar>
struct RoiFeatureBatch {
  MatrixX<Scalar> values;            // [I, C*h*w], row i flattened channel-major (c, y, x)
  std::vector<int> instance_ids;     // row -> InstanceSet index
  std::vector<int> batch_indices;    // row -> image index
  int pool_h = 0;
  int pool_w = 0;

  Index rows() const { return values.rows(); }
  Index cols() const { return values.cols(); }
};

namespace detail {

// One bilinear tap set: four flat plane offsets and their weights.
struct BilinearTap {
  Index idx[4];
  double wt[4];
};

// Sample point convention: pixel (y, x) holds the value located at
// (x + 0.5, y + 0.5). Coordinates are clamped to the outermost pixel centers.
inline BilinearTap bilinear_tap(double y, double x, Index height, Index width) {
  double v = std::clamp(y - 0.5, 0.0, static_cast<double>(height - 1));
  double u = std::clamp(x - 0.5, 0.0, static_cast<double>(width - 1));
  auto y0 = static_cast<Index>(std::floor(v));
  auto x0 = static_cast<Index>(std::floor(u));
  Index y1 = std::min(y0 + 1, height - 1);
  Index x1 = std::min(x0 + 1, width - 1);
  double ly = v - static_cast<double>(y0);
  double lx = u - static_cast<double>(x0);
  double hy = 1.0 - ly;
  double hx = 1.0 - lx;
  return BilinearTap{{y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1},
                     {hy * hx, hy * lx, ly * hx, ly * lx}};
}

// Taps for every sample of every bin, laid out [bin][sample].
inline std::vector<BilinearTap> roi_taps(const Box& box, Index height, Index width, int pool_h, int pool_w,
                                         int samples) {
  std::vector<BilinearTap> taps;
  taps.reserve(static_cast<std::size_t>(pool_h * pool_w * samples * samples));
  const double bin_h = box.height() / pool_h;
  const double bin_w = box.width() / pool_w;
  for (int ph = 0; ph < pool_h; ++ph)
    for (int pw = 0; pw < pool_w; ++pw)
      for (int iy = 0; iy < samples; ++iy) {
        const double y = box.y1 + (ph + (iy + 0.5) / samples) * bin_h;
        for (int ix = 0; ix < samples; ++ix) {
          const double x = box.x1 + (pw + (ix + 0.5) / samples) * bin_w;
          taps.push_back(bilinear_tap(y, x, height, width));
        }
      }
  return taps;
}

inline void check_roi_args(Index n, Index height, Index width, const Box& box, int batch_index, int pool_h,
                           int pool_w, int samples) {
  if (pool_h < 1 || pool_w < 1) throw std::invalid_argument("roi_align: pooled size must be >= 1");
  if (samples < 1) throw std::invalid_argument("roi_align: samples_per_bin must be >= 1");
  if (batch_index < 0 || batch_index >= n) throw std::invalid_argument("roi_align: batch index out of range");
  if (!(box.x1 >= 0 && box.y1 >= 0 && box.x1 < box.x2 && box.y1 < box.y2 && box.x2 <= width &&
        box.y2 <= height))
    throw std::invalid_argument("roi_align: box outside feature map");
}

}  // namespace detail

// Average of samples x samples bilinear samples on a regular grid inside each
// of the pool_h x pool_w bins. Returns [C, pool_h * pool_w] (row-major bins).
template <typename Scalar>
MatrixX<Scalar> roi_align(const Tensor4<Scalar>& features, const Box& box, int batch_index, int pool_h, int pool_w,
                          int samples_per_bin = 2) {
  detail::check_roi_args(features.n(), features.h(), features.w(), box, batch_index, pool_h, pool_w,
                         samples_per_bin);
  const auto taps = detail::roi_taps(box, features.h(), features.w(), pool_h, pool_w, samples_per_bin);
  const int per_bin = samples_per_bin * samples_per_bin;
  const Index bins = Index(pool_h) * pool_w;
  const auto image = features.image(batch_index);
  MatrixX<Scalar> out(features.c(), bins);
  for (Index c = 0; c < features.c(); ++c) {
    const Scalar* plane = image.row(c).data();
    for (Index b = 0; b < bins; ++b) {
      double acc = 0;
      for (int s = 0; s < per_bin; ++s) {
        const auto& t = taps[static_cast<std::size_t>(b * per_bin + s)];
        acc += t.wt[0] * plane[t.idx[0]] + t.wt[1] * plane[t.idx[1]] + t.wt[2] * plane[t.idx[2]] +
               t.wt[3] * plane[t.idx[3]];
      }
      out(c, b) = static_cast<Scalar>(acc / per_bin);
    }
  }
  return out;
}

// Scatters d(out) of roi_align back into grad_features (accumulating).
template <typename Scalar>
void roi_align_backward(const MatrixX<Scalar>& grad_out, const Box& box, int batch_index, int pool_h, int pool_w,
                        int samples_per_bin, Tensor4<Scalar>& grad_features) {
  detail::check_roi_args(grad_features.n(), grad_features.h(), grad_features.w(), box, batch_index, pool_h, pool_w,
                         samples_per_bin);
  const auto taps = detail::roi_taps(box, grad_features.h(), grad_features.w(), pool_h, pool_w, samples_per_bin);
  const int per_bin = samples_per_bin * samples_per_bin;
  const Index bins = Index(pool_h) * pool_w;
  auto image = grad_features.image(batch_index);
  for (Index c = 0; c < grad_features.c(); ++c) {
    Scalar* plane = image.row(c).data();
    for (Index b = 0; b < bins; ++b) {
      const double g = static_cast<double>(grad_out(c, b)) / per_bin;
      if (g == 0) continue;
      for (int s = 0; s < per_bin; ++s) {
        const auto& t = taps[static_cast<std::size_t>(b * per_bin + s)];
        for (int k = 0; k < 4; ++k) plane[t.idx[k]] += static_cast<Scalar>(g * t.wt[k]);
      }
    }
  }
}

// Row i = flatten(roi_align(features, instances[i])), channel-major.
template <typename Scalar>
RoiFeatureBatch<Scalar> extract_roi_batch(const Tensor4<Scalar>& features, const InstanceSet& instances, int pool_h,
                                          int pool_w, int samples_per_bin = 2) {
  RoiFeatureBatch<Scalar> batch;
  batch.pool_h = pool_h;
  batch.pool_w = pool_w;
  const Index dim = features.c() * pool_h * pool_w;
  batch.values.resize(instances.count(), dim);
  for (Index i = 0; i < instances.count(); ++i) {
    const auto& inst = instances[i];
    MatrixX<Scalar> pooled = roi_align(features, inst.box, inst.batch_index, pool_h, pool_w, samples_per_bin);
    batch.values.row(i) = Eigen::Map<const VectorX<Scalar>>(pooled.data(), dim).transpose();
    batch.instance_ids.push_back(static_cast<int>(i));
    batch.batch_indices.push_back(inst.batch_index);
  }
  return batch;
}

template <typename Scalar>
void extract_roi_batch_backward(const MatrixX<Scalar>& grad_rows, const InstanceSet& instances, int pool_h,
                                int pool_w, int samples_per_bin, Tensor4<Scalar>& grad_features) {
  const Index channels = grad_features.c();
  for (Index i = 0; i < instances.count(); ++i) {
    const auto& inst = instances[i];
    MatrixX<Scalar> g = Eigen::Map<const MatrixX<Scalar>>(grad_rows.row(i).data(), channels, Index(pool_h) * pool_w);
    roi_align_backward(g, inst.box, inst.batch_index, pool_h, pool_w, samples_per_bin, grad_features);
  }
}

// Integer pixel bounds of a region: floor of x1/y1, ceil of x2/y2, clipped.
struct PixelRect {
  Index x0, y0, x1, y1;  // half-open
};

inline PixelRect rasterize(const Box& box, Index height, Index width) {
  auto clampi = [](double v, Index hi) { return std::clamp<Index>(static_cast<Index>(v), 0, hi); };
  return PixelRect{clampi(std::floor(box.x1), width), clampi(std::floor(box.y1), height),
                   clampi(std::ceil(box.x2), width), clampi(std::ceil(box.y2), height)};
}

}  // namespace liaf
