#pragma once

#include "liaf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace liaf {

// Flat view of one parameter array, used by the optimizer and checkpoints.
template <typename Scalar>
struct ParamView {
  std::string name;
  Scalar* data;
  Index size;
  std::vector<Index> shape;
};

// 2-D convolution (square kernel, zero padding) with optional fused ReLU,
// lowered to im2col + GEMM per image.
template <typename Scalar>
struct Conv2d {
  Index in_c = 0, out_c = 0;
  int kernel = 3, stride = 1, pad = 1;
  bool relu = true;
  MatrixX<Scalar> weight;  // [out_c, in_c * k * k]
  VectorX<Scalar> bias;    // [out_c]

  struct Cache {
    std::vector<MatrixX<Scalar>> cols;
    Tensor4<Scalar> output;
    Index in_h = 0, in_w = 0;
  };

  struct Grad {
    MatrixX<Scalar> weight;
    VectorX<Scalar> bias;
    void zero(const Conv2d& c) {
      weight = MatrixX<Scalar>::Zero(c.weight.rows(), c.weight.cols());
      bias = VectorX<Scalar>::Zero(c.bias.size());
    }
  };

  Conv2d() = default;
  Conv2d(Index in_channels, Index out_channels, int k, int s, bool with_relu)
      : in_c(in_channels), out_c(out_channels), kernel(k), stride(s), pad(k / 2), relu(with_relu),
        weight(MatrixX<Scalar>::Zero(out_channels, in_channels * k * k)), bias(VectorX<Scalar>::Zero(out_channels)) {}

  Index out_size(Index in) const { return (in + 2 * pad - kernel) / stride + 1; }

  void init_he(std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(weight.cols())));
    for (Index i = 0; i < weight.size(); ++i) weight.data()[i] = static_cast<Scalar>(normal(rng));
    bias.setZero();
  }

  void im2col(const Tensor4<Scalar>& x, Index n, MatrixX<Scalar>& cols) const {
    const Index H = x.h(), W = x.w(), OH = out_size(H), OW = out_size(W);
    cols.resize(in_c * kernel * kernel, OH * OW);
    const Scalar* src = x.image_data(n);
    for (Index c = 0; c < in_c; ++c)
      for (int ky = 0; ky < kernel; ++ky)
        for (int kx = 0; kx < kernel; ++kx) {
          Scalar* row = cols.row((c * kernel + ky) * kernel + kx).data();
          for (Index oy = 0; oy < OH; ++oy) {
            const Index iy = oy * stride - pad + ky;
            Scalar* dst = row + oy * OW;
            if (iy < 0 || iy >= H) {
              std::fill(dst, dst + OW, Scalar(0));
              continue;
            }
            const Scalar* line = src + (c * H + iy) * W;
            for (Index ox = 0; ox < OW; ++ox) {
              const Index ix = ox * stride - pad + kx;
              dst[ox] = (ix >= 0 && ix < W) ? line[ix] : Scalar(0);
            }
          }
        }
  }

  void col2im(const MatrixX<Scalar>& cols, Index n, Tensor4<Scalar>& dx) const {
    const Index H = dx.h(), W = dx.w(), OH = out_size(H), OW = out_size(W);
    Scalar* dst = dx.image_data(n);
    for (Index c = 0; c < in_c; ++c)
      for (int ky = 0; ky < kernel; ++ky)
        for (int kx = 0; kx < kernel; ++kx) {
          const Scalar* row = cols.row((c * kernel + ky) * kernel + kx).data();
          for (Index oy = 0; oy < OH; ++oy) {
            const Index iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            Scalar* line = dst + (c * H + iy) * W;
            const Scalar* src = row + oy * OW;
            for (Index ox = 0; ox < OW; ++ox) {
              const Index ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < W) line[ix] += src[ox];
            }
          }
        }
  }

  Tensor4<Scalar> forward(const Tensor4<Scalar>& x, Cache* cache = nullptr) const {
    if (x.c() != in_c) throw std::invalid_argument("Conv2d: input has " + std::to_string(x.c()) + " channels");
    const Index OH = out_size(x.h()), OW = out_size(x.w());
    Tensor4<Scalar> y(x.n(), out_c, OH, OW);
    MatrixX<Scalar> local;
    if (cache) {
      cache->cols.resize(static_cast<std::size_t>(x.n()));
      cache->in_h = x.h();
      cache->in_w = x.w();
    }
    for (Index n = 0; n < x.n(); ++n) {
      MatrixX<Scalar>& cols = cache ? cache->cols[static_cast<std::size_t>(n)] : local;
      im2col(x, n, cols);
      auto out = y.image(n);
      out.noalias() = weight * cols;
      out.colwise() += bias;
      if (relu) out = out.cwiseMax(Scalar(0));
    }
    if (cache) cache->output = y;
    return y;
  }

  // Accumulates into grad; returns dL/dx.
  Tensor4<Scalar> backward(const Cache& cache, Tensor4<Scalar> grad_y, Grad& grad) const {
    const Index N = grad_y.n();
    if (relu) grad_y.flat().array() *= (cache.output.flat().array() > Scalar(0)).template cast<Scalar>();
    Tensor4<Scalar> dx(N, in_c, cache.in_h, cache.in_w);
    MatrixX<Scalar> dcols;
    for (Index n = 0; n < N; ++n) {
      const auto gy = grad_y.image(n);
      const auto& cols = cache.cols[static_cast<std::size_t>(n)];
      grad.weight.noalias() += gy * cols.transpose();
      grad.bias += gy.rowwise().sum();
      dcols.noalias() = weight.transpose() * gy;
      col2im(dcols, n, dx);
    }
    return dx;
  }
};

struct DetectorSpec {
  std::vector<int> widths{16, 32, 64, 64};
  std::vector<int> strides{2, 2, 2, 1};
  int kernel = 3;
  int head_width = 32;
  int num_classes = 3;
  int in_channels = 3;

  int neck_stride() const {
    int s = 1;
    for (int v : strides) s *= v;
    return s;
  }
  int neck_channels() const { return widths.back(); }
};

template <typename Scalar>
struct DetectorOutput {
  FeatureMap<Scalar> neck;
  Tensor4<Scalar> class_logits;  // [N, num_classes, H, W]
  Tensor4<Scalar> box_deltas;    // [N, 4, H, W] distances (l, t, r, b) in neck-stride units
};

// Tiny single-level dense detector: a strided conv backbone whose last
// activation is the neck, then a shared 3x3 tower and two 1x1 heads.
template <typename Scalar>
class TinyDetector {
 public:
  struct Cache {
    std::vector<typename Conv2d<Scalar>::Cache> backbone;
    typename Conv2d<Scalar>::Cache tower, cls, box;
  };

  struct Grads {
    std::vector<typename Conv2d<Scalar>::Grad> backbone;
    typename Conv2d<Scalar>::Grad tower, cls, box;
  };

  TinyDetector() = default;
  TinyDetector(const DetectorSpec& spec, std::uint64_t seed) : spec_(spec) {
    if (spec.widths.empty() || spec.widths.size() != spec.strides.size())
      throw std::invalid_argument("DetectorSpec: widths and strides must be nonempty and equal length");
    std::mt19937_64 rng(seed);
    Index in = spec.in_channels;
    for (std::size_t i = 0; i < spec.widths.size(); ++i) {
      backbone_.emplace_back(in, spec.widths[i], spec.kernel, spec.strides[i], true);
      backbone_.back().init_he(rng);
      in = spec.widths[i];
    }
    tower_ = Conv2d<Scalar>(in, spec.head_width, 3, 1, true);
    tower_.init_he(rng);
    cls_ = Conv2d<Scalar>(spec.head_width, spec.num_classes, 1, 1, false);
    box_ = Conv2d<Scalar>(spec.head_width, 4, 1, 1, false);
    std::normal_distribution<double> small(0.0, 0.01);
    for (Index i = 0; i < cls_.weight.size(); ++i) cls_.weight.data()[i] = static_cast<Scalar>(small(rng));
    for (Index i = 0; i < box_.weight.size(); ++i) box_.weight.data()[i] = static_cast<Scalar>(small(rng));
    // Focal-loss prior: initial foreground probability 0.01.
    cls_.bias.setConstant(static_cast<Scalar>(-std::log((1.0 - 0.01) / 0.01)));
    box_.bias.setConstant(Scalar(1));
  }

  const DetectorSpec& spec() const { return spec_; }

  Tensor4<Scalar> backbone_forward(const Tensor4<Scalar>& images, Cache* cache = nullptr) const {
    if (cache) cache->backbone.resize(backbone_.size());
    Tensor4<Scalar> x = images;
    for (std::size_t i = 0; i < backbone_.size(); ++i) x = backbone_[i].forward(x, cache ? &cache->backbone[i] : nullptr);
    return x;
  }

  void head_forward(const Tensor4<Scalar>& neck, Tensor4<Scalar>& logits, Tensor4<Scalar>& deltas,
                    Cache* cache = nullptr) const {
    const auto t = tower_.forward(neck, cache ? &cache->tower : nullptr);
    logits = cls_.forward(t, cache ? &cache->cls : nullptr);
    deltas = box_.forward(t, cache ? &cache->box : nullptr);
  }

  DetectorOutput<Scalar> forward(const Tensor4<Scalar>& images, Cache* cache = nullptr) const {
    DetectorOutput<Scalar> out;
    out.neck.values = backbone_forward(images, cache);
    out.neck.level_stride = spec_.neck_stride();
    head_forward(out.neck.values, out.class_logits, out.box_deltas, cache);
    return out;
  }

  Grads zero_grads() const {
    Grads g;
    g.backbone.resize(backbone_.size());
    for (std::size_t i = 0; i < backbone_.size(); ++i) g.backbone[i].zero(backbone_[i]);
    g.tower.zero(tower_);
    g.cls.zero(cls_);
    g.box.zero(box_);
    return g;
  }

  // Returns dL/dneck.
  Tensor4<Scalar> head_backward(const Cache& cache, const Tensor4<Scalar>& grad_logits,
                                const Tensor4<Scalar>& grad_deltas, Grads& grads) const {
    auto dt = cls_.backward(cache.cls, grad_logits, grads.cls);
    dt.flat() += box_.backward(cache.box, grad_deltas, grads.box).flat();
    return tower_.backward(cache.tower, std::move(dt), grads.tower);
  }

  void backbone_backward(const Cache& cache, Tensor4<Scalar> grad_neck, Grads& grads) const {
    for (std::size_t i = backbone_.size(); i-- > 0;)
      grad_neck = backbone_[i].backward(cache.backbone[i], std::move(grad_neck), grads.backbone[i]);
  }

  std::vector<ParamView<Scalar>> parameters() { return views<Scalar>(*this); }
  std::vector<ParamView<const Scalar>> parameters() const { return views<const Scalar>(*this); }

  static std::vector<ParamView<Scalar>> grad_views(Grads& g) {
    std::vector<ParamView<Scalar>> out;
    for (std::size_t i = 0; i < g.backbone.size(); ++i) add<Scalar>(out, "backbone." + std::to_string(i), g.backbone[i]);
    add<Scalar>(out, "tower", g.tower);
    add<Scalar>(out, "cls", g.cls);
    add<Scalar>(out, "box", g.box);
    return out;
  }

 private:
  template <typename T, typename Layer>
  static void add(std::vector<ParamView<T>>& out, const std::string& prefix, Layer& l) {
    out.push_back({prefix + ".weight", l.weight.data(), l.weight.size(), {l.weight.rows(), l.weight.cols()}});
    out.push_back({prefix + ".bias", l.bias.data(), l.bias.size(), {l.bias.size()}});
  }

  template <typename T, typename Self>
  static std::vector<ParamView<T>> views(Self& d) {
    std::vector<ParamView<T>> out;
    for (std::size_t i = 0; i < d.backbone_.size(); ++i) add(out, "backbone." + std::to_string(i), d.backbone_[i]);
    add(out, "tower", d.tower_);
    add(out, "cls", d.cls_);
    add(out, "box", d.box_);
    return out;
  }

  DetectorSpec spec_;
  std::vector<Conv2d<Scalar>> backbone_;
  Conv2d<Scalar> tower_, cls_, box_;
};

// SGD with momentum and L2 weight decay folded into the gradient:
//   v <- momentum * v + (g + wd * p);  p <- p - lr * v
template <typename Scalar>
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const std::vector<ParamView<Scalar>>& params, const std::vector<ParamView<Scalar>>& grads, double lr) {
    if (velocity_.empty())
      for (const auto& p : params) velocity_.push_back(VectorX<Scalar>::Zero(p.size));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Eigen::Map<VectorX<Scalar>> p(params[i].data, params[i].size);
      Eigen::Map<const VectorX<Scalar>> g(grads[i].data, grads[i].size);
      auto& v = velocity_[i];
      v = static_cast<Scalar>(momentum_) * v + g + static_cast<Scalar>(weight_decay_) * p;
      p -= static_cast<Scalar>(lr) * v;
    }
  }

 private:
  double momentum_, weight_decay_;
  std::vector<VectorX<Scalar>> velocity_;
};

// Rescales all gradients in place so their global L2 norm is at most max_norm.
template <typename Scalar>
double clip_grad_norm(const std::vector<ParamView<Scalar>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads) sq += Eigen::Map<const VectorX<Scalar>>(g.data, g.size).template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const auto s = static_cast<Scalar>(max_norm / norm);
    for (const auto& g : grads) Eigen::Map<VectorX<Scalar>>(g.data, g.size) *= s;
  }
  return norm;
}

}  // namespace liaf
