#pragma once

#include "liaf/selector.hpp"

#include <random>
#include <stdexcept>

namespace liaf {

enum class Rescale { none, mean_one };

// Per-image single-channel multiplicative weight map [N, 1, H, W].
template <typename Scalar>
struct SoftMask {
  Tensor4<Scalar> values;

  static SoftMask ones(Index n, Index h, Index w) { return SoftMask{Tensor4<Scalar>(n, 1, h, w, Scalar(1))}; }
  Index n() const { return values.n(); }
  Index h() const { return values.h(); }
  Index w() const { return values.w(); }
};

namespace detail {

// Size of the softmax group each instance was normalized in.
inline std::vector<Index> group_sizes(const InstanceSet& instances, SoftmaxScope scope) {
  std::vector<Index> out(static_cast<std::size_t>(instances.count()), instances.count());
  if (scope == SoftmaxScope::image)
    for (Index i = 0; i < instances.count(); ++i) {
      Index n = 0;
      for (const auto& other : instances.items) n += other.batch_index == instances[i].batch_index;
      out[static_cast<std::size_t>(i)] = n;
    }
  return out;
}

// Weight actually multiplied into the mask, and d(weight)/d(score).
template <typename Scalar>
void mask_weights(const InstanceSet& instances, const VectorX<Scalar>& scores, Rescale rescale, SoftmaxScope scope,
                  VectorX<Scalar>& weights, VectorX<Scalar>& slopes) {
  weights = scores;
  slopes = VectorX<Scalar>::Ones(scores.size());
  if (rescale == Rescale::none) return;
  const auto sizes = group_sizes(instances, scope);
  for (Index i = 0; i < scores.size(); ++i) {
    const auto g = static_cast<Scalar>(sizes[static_cast<std::size_t>(i)]);
    const Scalar v = g * scores[i];
    weights[i] = v < Scalar(1) ? v : Scalar(1);
    slopes[i] = v < Scalar(1) ? g : Scalar(0);
  }
}

}  // namespace detail

// Starts from all ones and multiplies each instance's weight into its
// rasterized region (outward-rounded box) of image b_i. With mean_one the
// score is scaled by its softmax group size and clamped to 1.
template <typename Scalar>
SoftMask<Scalar> build_soft_mask(const InstanceSet& instances, const VectorX<Scalar>& scores, Index n, Index h,
                                 Index w, Rescale rescale = Rescale::none,
                                 SoftmaxScope scope = SoftmaxScope::batch) {
  if (scores.size() != instances.count())
    throw std::invalid_argument("build_soft_mask: score count does not match instance count");
  auto mask = SoftMask<Scalar>::ones(n, h, w);
  VectorX<Scalar> weights, slopes;
  detail::mask_weights(instances, scores, rescale, scope, weights, slopes);
  for (Index i = 0; i < instances.count(); ++i) {
    const auto& inst = instances[i];
    if (inst.batch_index < 0 || inst.batch_index >= n) throw std::invalid_argument("build_soft_mask: bad batch index");
    const auto r = rasterize(inst.box, h, w);
    for (Index y = r.y0; y < r.y1; ++y)
      for (Index x = r.x0; x < r.x1; ++x) mask.values(inst.batch_index, 0, y, x) *= weights[i];
  }
  return mask;
}

// dL/dscores given dL/dM. Uses the product of the other covering weights
// rather than dividing, so zero weights are handled.
template <typename Scalar>
VectorX<Scalar> build_soft_mask_backward(const InstanceSet& instances, const VectorX<Scalar>& scores,
                                         const Tensor4<Scalar>& grad_mask, Rescale rescale = Rescale::none,
                                         SoftmaxScope scope = SoftmaxScope::batch) {
  const Index h = grad_mask.h(), w = grad_mask.w();
  VectorX<Scalar> weights, slopes;
  detail::mask_weights(instances, scores, rescale, scope, weights, slopes);
  std::vector<PixelRect> rects;
  for (const auto& inst : instances.items) rects.push_back(rasterize(inst.box, h, w));
  VectorX<Scalar> grad = VectorX<Scalar>::Zero(instances.count());
  for (Index i = 0; i < instances.count(); ++i) {
    if (slopes[i] == Scalar(0)) continue;
    const auto& r = rects[static_cast<std::size_t>(i)];
    const int b = instances[i].batch_index;
    Scalar acc = 0;
    for (Index y = r.y0; y < r.y1; ++y)
      for (Index x = r.x0; x < r.x1; ++x) {
        Scalar others = 1;
        for (Index j = 0; j < instances.count(); ++j) {
          if (j == i || instances[j].batch_index != b) continue;
          const auto& q = rects[static_cast<std::size_t>(j)];
          if (y >= q.y0 && y < q.y1 && x >= q.x0 && x < q.x1) others *= weights[j];
        }
        acc += grad_mask(b, 0, y, x) * others;
      }
    grad[i] = acc * slopes[i];
  }
  return grad;
}

// F * M broadcast over channels.
template <typename Scalar>
Tensor4<Scalar> apply_mask(const Tensor4<Scalar>& features, const SoftMask<Scalar>& mask) {
  if (features.n() != mask.n() || features.h() != mask.h() || features.w() != mask.w())
    throw std::invalid_argument("apply_mask: shape mismatch " + features.shape_string() + " vs " +
                                mask.values.shape_string());
  Tensor4<Scalar> out(features.n(), features.c(), features.h(), features.w());
  for (Index n = 0; n < features.n(); ++n) {
    const auto m = mask.values.image(n);  // [1, HW]
    out.image(n) = features.image(n).array().rowwise() * m.row(0).array();
  }
  return out;
}

// Learnable 1x1 convolution aligning student channels to teacher channels.
template <typename Scalar>
struct ChannelProjection {
  MatrixX<Scalar> weight;  // [C_T, C_S]
  VectorX<Scalar> bias;    // [C_T] or empty

  Index in_channels() const { return weight.cols(); }
  Index out_channels() const { return weight.rows(); }

  static ChannelProjection identity(Index channels) {
    return ChannelProjection{MatrixX<Scalar>::Identity(channels, channels), VectorX<Scalar>()};
  }

  static ChannelProjection random(Index out_c, Index in_c, bool with_bias, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, std::sqrt(1.0 / static_cast<double>(in_c)));
    ChannelProjection p;
    p.weight.resize(out_c, in_c);
    for (Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = static_cast<Scalar>(normal(rng));
    if (with_bias) p.bias = VectorX<Scalar>::Zero(out_c);
    return p;
  }

  Tensor4<Scalar> forward(const Tensor4<Scalar>& x) const {
    if (x.c() != in_channels()) throw std::invalid_argument("ChannelProjection: input channel mismatch");
    Tensor4<Scalar> y(x.n(), out_channels(), x.h(), x.w());
    for (Index n = 0; n < x.n(); ++n) {
      y.image(n).noalias() = weight * x.image(n);
      if (bias.size() > 0) y.image(n).colwise() += bias;
    }
    return y;
  }

  // Accumulates parameter gradients; returns dL/dx.
  Tensor4<Scalar> backward(const Tensor4<Scalar>& x, const Tensor4<Scalar>& grad_y, MatrixX<Scalar>& grad_weight,
                           VectorX<Scalar>& grad_bias) const {
    Tensor4<Scalar> gx(x.n(), x.c(), x.h(), x.w());
    if (grad_weight.size() == 0) grad_weight = MatrixX<Scalar>::Zero(weight.rows(), weight.cols());
    if (bias.size() > 0 && grad_bias.size() == 0) grad_bias = VectorX<Scalar>::Zero(bias.size());
    for (Index n = 0; n < x.n(); ++n) {
      grad_weight.noalias() += grad_y.image(n) * x.image(n).transpose();
      if (bias.size() > 0) grad_bias += grad_y.image(n).rowwise().sum();
      gx.image(n).noalias() = weight.transpose() * grad_y.image(n);
    }
    return gx;
  }
};

// (1/NCHW) |F_T * M_T - P_S * M_S|^2 where P_S is the already projected
// student map.
template <typename Scalar>
Scalar masked_distill_loss(const Tensor4<Scalar>& teacher, const Tensor4<Scalar>& projected_student,
                           const SoftMask<Scalar>& mask_teacher, const SoftMask<Scalar>& mask_student) {
  if (!teacher.same_shape(projected_student))
    throw std::invalid_argument("masked_distill_loss: channel/shape mismatch after projection " +
                                teacher.shape_string() + " vs " + projected_student.shape_string());
  const VectorX<Scalar> diff = apply_mask(teacher, mask_teacher).flat() - apply_mask(projected_student, mask_student).flat();
  return diff.squaredNorm() / static_cast<Scalar>(teacher.size());
}

template <typename Scalar>
Scalar masked_distill_loss(const Tensor4<Scalar>& teacher, const Tensor4<Scalar>& student,
                           const SoftMask<Scalar>& mask_teacher, const SoftMask<Scalar>& mask_student,
                           const ChannelProjection<Scalar>& proj) {
  return masked_distill_loss(teacher, proj.forward(student), mask_teacher, mask_student);
}

template <typename Scalar>
struct MaskedLossGradient {
  Scalar loss = 0;
  Tensor4<Scalar> projected_student;  // dL/dP_S
  Tensor4<Scalar> mask_teacher;       // dL/dM_T [N,1,H,W]
  Tensor4<Scalar> mask_student;       // dL/dM_S [N,1,H,W]
};

template <typename Scalar>
MaskedLossGradient<Scalar> masked_distill_loss_gradient(const Tensor4<Scalar>& teacher,
                                                        const Tensor4<Scalar>& projected_student,
                                                        const SoftMask<Scalar>& mask_teacher,
                                                        const SoftMask<Scalar>& mask_student) {
  if (!teacher.same_shape(projected_student))
    throw std::invalid_argument("masked_distill_loss: channel/shape mismatch after projection");
  const Scalar scale = Scalar(2) / static_cast<Scalar>(teacher.size());
  MaskedLossGradient<Scalar> g;
  g.projected_student = Tensor4<Scalar>::zeros_like(projected_student);
  g.mask_teacher = Tensor4<Scalar>(teacher.n(), 1, teacher.h(), teacher.w());
  g.mask_student = Tensor4<Scalar>(teacher.n(), 1, teacher.h(), teacher.w());
  Scalar total = 0;
  for (Index n = 0; n < teacher.n(); ++n) {
    const auto mt = mask_teacher.values.image(n).row(0).array();
    const auto ms = mask_student.values.image(n).row(0).array();
    const auto ft = teacher.image(n).array();
    const auto ps = projected_student.image(n).array();
    const auto resid = ((ft.rowwise() * mt) - (ps.rowwise() * ms)).eval();  // [C, HW]
    total += resid.square().sum();
    g.projected_student.image(n).array() = (-scale * resid).rowwise() * ms;
    g.mask_teacher.image(n).row(0).array() = scale * (resid * ft).colwise().sum();
    g.mask_student.image(n).row(0).array() = -scale * (resid * ps).colwise().sum();
  }
  g.loss = total / static_cast<Scalar>(teacher.size());
  return g;
}

// (1/NCHW) |M * (F_T - P_S)|^2 with a single shared mask.
template <typename Scalar>
Scalar generic_masked_loss(const Tensor4<Scalar>& teacher, const Tensor4<Scalar>& projected_student,
                           const SoftMask<Scalar>& mask) {
  if (!teacher.same_shape(projected_student))
    throw std::invalid_argument("generic_masked_loss: channel/shape mismatch after projection");
  Tensor4<Scalar> diff(teacher.n(), teacher.c(), teacher.h(), teacher.w());
  diff.flat() = teacher.flat() - projected_student.flat();
  return apply_mask(diff, mask).flat().squaredNorm() / static_cast<Scalar>(teacher.size());
}

template <typename Scalar>
Scalar generic_masked_loss(const Tensor4<Scalar>& teacher, const Tensor4<Scalar>& student,
                           const SoftMask<Scalar>& mask, const ChannelProjection<Scalar>& proj) {
  return generic_masked_loss(teacher, proj.forward(student), mask);
}

}  // namespace liaf
