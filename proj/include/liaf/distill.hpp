#pragma once

#include "liaf/mask.hpp"

namespace liaf {

// Which scores drive the two masks.
enum class MaskPolicy {
  separate,      // M_T from A^T, M_S from A^S
  shared_mean,   // one mask from (A^T + A^S) / 2
  teacher_only,  // one mask from A^T
  all_ones,      // plain feature mimicking
};

struct DistillTermOptions {
  MaskPolicy policy = MaskPolicy::separate;
  SoftmaxScope scope = SoftmaxScope::batch;
  Rescale rescale = Rescale::none;
  bool detach_scores = true;
  int pool_h = 7;
  int pool_w = 7;
  int samples_per_bin = 2;
};

template <typename Scalar>
struct DistillTerm {
  Scalar loss = 0;
  Tensor4<Scalar> grad_projected;   // total dL/dP_S
  Tensor4<Scalar> grad_via_scores;  // part of grad_projected flowing through A^S
  SoftMask<Scalar> mask_teacher;
  SoftMask<Scalar> mask_student;
  AttentionScores<Scalar> teacher_scores;
  AttentionScores<Scalar> student_scores;
};

// Instance-reweighted distillation loss on one batch and its gradient with
// respect to the projected student map. Teacher features and the ensemble
// are constants. When frozen_student_scores is given it replaces A^S and is
// treated as a constant regardless of detach_scores.
template <typename Scalar>
DistillTerm<Scalar> distill_term(const Tensor4<Scalar>& teacher, const Tensor4<Scalar>& projected_student,
                                 const InstanceSet& instances, const SelectorEnsemble<Scalar>& ensemble,
                                 const DistillTermOptions& opt,
                                 const AttentionScores<Scalar>* frozen_student_scores = nullptr) {
  if (!teacher.same_shape(projected_student))
    throw std::invalid_argument("distill_term: teacher and projected student shapes differ " +
                                teacher.shape_string() + " vs " + projected_student.shape_string());
  const Index N = teacher.n(), H = teacher.h(), W = teacher.w();
  DistillTerm<Scalar> term;
  term.grad_via_scores = Tensor4<Scalar>::zeros_like(projected_student);

  if (opt.policy == MaskPolicy::all_ones || instances.empty()) {
    term.mask_teacher = term.mask_student = SoftMask<Scalar>::ones(N, H, W);
    auto g = masked_distill_loss_gradient(teacher, projected_student, term.mask_teacher, term.mask_student);
    term.loss = g.loss;
    term.grad_projected = std::move(g.projected_student);
    return term;
  }

  const auto roi_t = extract_roi_batch(teacher, instances, opt.pool_h, opt.pool_w, opt.samples_per_bin);
  term.teacher_scores = average_scores(roi_t, ensemble, opt.scope, ScoreSource::teacher);

  const bool needs_student = opt.policy == MaskPolicy::separate || opt.policy == MaskPolicy::shared_mean;
  RoiFeatureBatch<Scalar> roi_s;
  if (needs_student) {
    if (frozen_student_scores) {
      term.student_scores = *frozen_student_scores;
    } else {
      roi_s = extract_roi_batch(projected_student, instances, opt.pool_h, opt.pool_w, opt.samples_per_bin);
      term.student_scores = average_scores(roi_s, ensemble, opt.scope, ScoreSource::student);
    }
  }

  VectorX<Scalar> mask_scores;
  switch (opt.policy) {
    case MaskPolicy::separate:
      term.mask_teacher = build_soft_mask(instances, term.teacher_scores.values, N, H, W, opt.rescale, opt.scope);
      term.mask_student = build_soft_mask(instances, term.student_scores.values, N, H, W, opt.rescale, opt.scope);
      break;
    case MaskPolicy::shared_mean:
      mask_scores = (term.teacher_scores.values + term.student_scores.values) / Scalar(2);
      term.mask_teacher = build_soft_mask(instances, mask_scores, N, H, W, opt.rescale, opt.scope);
      term.mask_student = term.mask_teacher;
      break;
    case MaskPolicy::teacher_only:
      term.mask_teacher = build_soft_mask(instances, term.teacher_scores.values, N, H, W, opt.rescale, opt.scope);
      term.mask_student = term.mask_teacher;
      break;
    case MaskPolicy::all_ones:
      break;
  }

  auto g = masked_distill_loss_gradient(teacher, projected_student, term.mask_teacher, term.mask_student);
  term.loss = g.loss;
  term.grad_projected = std::move(g.projected_student);

  if (needs_student && !opt.detach_scores && !frozen_student_scores) {
    VectorX<Scalar> grad_scores;
    if (opt.policy == MaskPolicy::separate) {
      grad_scores =
          build_soft_mask_backward(instances, term.student_scores.values, g.mask_student, opt.rescale, opt.scope);
    } else {
      Tensor4<Scalar> gm(N, 1, H, W);
      gm.flat() = g.mask_teacher.flat() + g.mask_student.flat();
      grad_scores = build_soft_mask_backward(instances, mask_scores, gm, opt.rescale, opt.scope) / Scalar(2);
    }
    const auto sg = average_scores_backward(roi_s, ensemble, term.student_scores, grad_scores, opt.scope);
    extract_roi_batch_backward(sg.roi, instances, opt.pool_h, opt.pool_w, opt.samples_per_bin,
                               term.grad_via_scores);
    term.grad_projected.flat() += term.grad_via_scores.flat();
  }
  return term;
}

}  // namespace liaf
