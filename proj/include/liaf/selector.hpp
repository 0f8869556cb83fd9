#pragma once

#include "liaf/roi.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

namespace liaf {

enum class SoftmaxScope { batch, image };
enum class ScoreSource { teacher, student };

// K instance selectors stored as the rows of a [K, C*h*w] matrix. Column
// layout matches RoiFeatureBatch rows (channel-major).
template <typename Scalar>
struct SelectorEnsemble {
  MatrixX<Scalar> vectors;

  Index K() const { return vectors.rows(); }
  Index dim() const { return vectors.cols(); }
};

template <typename Scalar>
struct AttentionScores {
  VectorX<Scalar> values;                      // [I], averaged over selectors
  ScoreSource source = ScoreSource::teacher;
  std::optional<MatrixX<Scalar>> per_selector;  // [K, I]
};

template <typename Scalar>
SelectorEnsemble<Scalar> init_ensemble(Index K, Index dim, std::uint64_t seed) {
  if (K < 1) throw std::invalid_argument("init_ensemble: K must be >= 1");
  if (dim < 1) throw std::invalid_argument("init_ensemble: dim must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  SelectorEnsemble<Scalar> e;
  e.vectors.resize(K, dim);
  for (Index k = 0; k < K; ++k) {
    do {
      for (Index j = 0; j < dim; ++j) e.vectors(k, j) = static_cast<Scalar>(normal(rng));
    } while (e.vectors.row(k).squaredNorm() == Scalar(0));
  }
  return e;
}

namespace detail {

// Group id per row: all zero for batch scope, the image index for image scope.
inline std::vector<int> softmax_groups(const std::vector<int>& batch_indices, SoftmaxScope scope) {
  if (scope == SoftmaxScope::batch) return std::vector<int>(batch_indices.size(), 0);
  return batch_indices;
}

template <typename Scalar>
VectorX<Scalar> grouped_softmax(const VectorX<Scalar>& logits, const std::vector<int>& groups) {
  VectorX<Scalar> out(logits.size());
  std::vector<int> seen;
  for (Index i = 0; i < logits.size(); ++i) {
    const int g = groups[static_cast<std::size_t>(i)];
    if (std::find(seen.begin(), seen.end(), g) != seen.end()) continue;
    seen.push_back(g);
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Index j = 0; j < logits.size(); ++j)
      if (groups[static_cast<std::size_t>(j)] == g) mx = std::max(mx, logits[j]);
    Scalar sum = 0;
    for (Index j = 0; j < logits.size(); ++j)
      if (groups[static_cast<std::size_t>(j)] == g) sum += (out[j] = std::exp(logits[j] - mx));
    for (Index j = 0; j < logits.size(); ++j)
      if (groups[static_cast<std::size_t>(j)] == g) out[j] /= sum;
  }
  return out;
}

// Vector-Jacobian product of grouped_softmax given its output.
template <typename Scalar>
VectorX<Scalar> grouped_softmax_backward(const VectorX<Scalar>& probs, const VectorX<Scalar>& grad,
                                         const std::vector<int>& groups) {
  VectorX<Scalar> out(probs.size());
  for (Index i = 0; i < probs.size(); ++i) {
    Scalar dot = 0;
    for (Index j = 0; j < probs.size(); ++j)
      if (groups[static_cast<std::size_t>(j)] == groups[static_cast<std::size_t>(i)]) dot += probs[j] * grad[j];
    out[i] = probs[i] * (grad[i] - dot);
  }
  return out;
}

template <typename Scalar>
void check_scoring_args(const RoiFeatureBatch<Scalar>& roi, const SelectorEnsemble<Scalar>& ensemble) {
  if (roi.cols() != ensemble.dim())
    throw std::invalid_argument("selector: ROI feature width " + std::to_string(roi.cols()) +
                                " does not match selector length " + std::to_string(ensemble.dim()));
}

}  // namespace detail

// Softmax over instances of the logits F_ROI * E_k.
template <typename Scalar>
VectorX<Scalar> score_instances(const RoiFeatureBatch<Scalar>& roi, const SelectorEnsemble<Scalar>& ensemble, Index k,
                                SoftmaxScope scope = SoftmaxScope::batch) {
  if (k < 0 || k >= ensemble.K()) throw std::invalid_argument("score_instances: selector index out of range");
  if (roi.rows() == 0) return VectorX<Scalar>(0);
  detail::check_scoring_args(roi, ensemble);
  VectorX<Scalar> logits = roi.values * ensemble.vectors.row(k).transpose();
  return detail::grouped_softmax(logits, detail::softmax_groups(roi.batch_indices, scope));
}

template <typename Scalar>
AttentionScores<Scalar> average_scores(const RoiFeatureBatch<Scalar>& roi, const SelectorEnsemble<Scalar>& ensemble,
                                       SoftmaxScope scope = SoftmaxScope::batch,
                                       ScoreSource source = ScoreSource::teacher) {
  AttentionScores<Scalar> out;
  out.source = source;
  const Index I = roi.rows();
  MatrixX<Scalar> per(ensemble.K(), I);
  if (I > 0) {
    detail::check_scoring_args(roi, ensemble);
    const auto groups = detail::softmax_groups(roi.batch_indices, scope);
    MatrixX<Scalar> logits = roi.values * ensemble.vectors.transpose();  // [I, K]
    for (Index k = 0; k < ensemble.K(); ++k) {
      VectorX<Scalar> col = logits.col(k);
      per.row(k) = detail::grouped_softmax(col, groups).transpose();
    }
  }
  out.values = per.colwise().mean().transpose();
  if (I == 0) out.values.resize(0);
  out.per_selector = std::move(per);
  return out;
}

template <typename Scalar>
struct ScoreGradients {
  MatrixX<Scalar> roi;       // [I, D]
  MatrixX<Scalar> ensemble;  // [K, D]
};

// Backward of average_scores given dL/dA (averaged scores).
template <typename Scalar>
ScoreGradients<Scalar> average_scores_backward(const RoiFeatureBatch<Scalar>& roi,
                                               const SelectorEnsemble<Scalar>& ensemble,
                                               const AttentionScores<Scalar>& scores, const VectorX<Scalar>& grad,
                                               SoftmaxScope scope = SoftmaxScope::batch) {
  if (!scores.per_selector) throw std::invalid_argument("average_scores_backward: per-selector scores required");
  const Index K = ensemble.K();
  const Index I = roi.rows();
  ScoreGradients<Scalar> g{MatrixX<Scalar>::Zero(I, roi.cols()), MatrixX<Scalar>::Zero(K, ensemble.dim())};
  if (I == 0) return g;
  const auto groups = detail::softmax_groups(roi.batch_indices, scope);
  MatrixX<Scalar> dlogits(I, K);
  const VectorX<Scalar> per_grad = grad / static_cast<Scalar>(K);
  for (Index k = 0; k < K; ++k) {
    VectorX<Scalar> probs = scores.per_selector->row(k).transpose();
    dlogits.col(k) = detail::grouped_softmax_backward(probs, per_grad, groups);
  }
  g.roi.noalias() = dlogits * ensemble.vectors;
  g.ensemble.noalias() = dlogits.transpose() * roi.values;
  return g;
}

// Sum_{i != j} E_i . E_j / Sum_k |E_k|^2 (the 2/(2x) factors cancel).
template <typename Scalar>
Scalar diversity_loss(const SelectorEnsemble<Scalar>& ensemble) {
  if (ensemble.K() < 2) return Scalar(0);
  const Scalar total = ensemble.vectors.squaredNorm();
  if (total == Scalar(0)) throw std::domain_error("diversity_loss: all-zero selector ensemble");
  const Scalar cross = ensemble.vectors.colwise().sum().squaredNorm() - total;
  return cross / total;
}

template <typename Scalar>
MatrixX<Scalar> diversity_loss_gradient(const SelectorEnsemble<Scalar>& ensemble) {
  MatrixX<Scalar> g = MatrixX<Scalar>::Zero(ensemble.K(), ensemble.dim());
  if (ensemble.K() < 2) return g;
  const Scalar total = ensemble.vectors.squaredNorm();
  if (total == Scalar(0)) throw std::domain_error("diversity_loss: all-zero selector ensemble");
  const Scalar loss = diversity_loss(ensemble);
  const auto sum = ensemble.vectors.colwise().sum();
  for (Index k = 0; k < ensemble.K(); ++k)
    g.row(k) = (Scalar(2) * (sum - ensemble.vectors.row(k)) - Scalar(2) * loss * ensemble.vectors.row(k)) / total;
  return g;
}

template <typename Scalar>
Scalar selector_training_loss(Scalar task_loss, const SelectorEnsemble<Scalar>& ensemble, Scalar mu) {
  if (mu < 0) throw std::invalid_argument("selector_training_loss: mu must be >= 0");
  if (mu == Scalar(0)) return task_loss;
  return task_loss + mu * diversity_loss(ensemble);
}

}  // namespace liaf
