#pragma once

// Supervision targets and the four-term objective: two past segmentation
// cross-entropies (text and vision streams against the same clean labels), a
// future class cross-entropy masked beyond the stop position, and a squared
// duration error strictly before it. All reductions are sums; an optional
// mean mode divides each term by its counted positions.

#include <vector>

#include "lta/backbone.hpp"
#include "lta/kernels.hpp"
#include "lta/types.hpp"

namespace lta {

template <typename Scalar>
struct TargetPack {
  MatrixX<Scalar> past_onehot;    // theta0 x K, clean labels for both past heads
  MatrixX<Scalar> future_onehot;  // N x (K+1)
  VectorX<Scalar> durations;      // N, fractions of the horizon
  int none_pos = 0;               // 1-based stop-query position; N+1 when truncated
};

template <typename Scalar>
struct LossBreakdown {
  Scalar text = 0, vision = 0, future_class = 0, duration = 0, total = 0;
};

// Builds the target pack for one sample. Future segments must cover the
// horizon exactly; with more segments than queries the first N are kept and
// their duration fractions renormalized over the kept span.
template <typename Scalar>
TargetPack<Scalar> build_targets(const std::vector<int>& past_labels,
                                 const std::vector<Segment>& future, Index num_queries,
                                 Index horizon, const Vocabulary& vocab) {
  if (horizon < 1) throw InputError("build_targets: empty horizon");
  const int k = vocab.num_classes();
  const int none = vocab.none_id();

  Index covered = 0;
  for (const auto& s : future) {
    if (s.class_id < 0 || s.class_id >= k)
      throw InputError("build_targets: segment class out of range");
    if (s.length < 1) throw InputError("build_targets: non-positive segment length");
    covered += s.length;
  }
  if (covered != horizon) throw InputError("build_targets: segments do not cover the horizon");

  TargetPack<Scalar> t;
  t.past_onehot = MatrixX<Scalar>::Zero(Index(past_labels.size()), k);
  for (size_t i = 0; i < past_labels.size(); ++i) {
    if (past_labels[i] < 0 || past_labels[i] >= k)
      throw InputError("build_targets: past label out of range");
    t.past_onehot(Index(i), past_labels[i]) = Scalar(1);
  }

  t.future_onehot = MatrixX<Scalar>::Zero(num_queries, k + 1);
  t.durations = VectorX<Scalar>::Zero(num_queries);

  const Index kept = std::min<Index>(Index(future.size()), num_queries);
  Index kept_frames = 0;
  for (Index i = 0; i < kept; ++i) kept_frames += future[size_t(i)].length;
  for (Index i = 0; i < kept; ++i) {
    t.future_onehot(i, future[size_t(i)].class_id) = Scalar(1);
    t.durations(i) = Scalar(future[size_t(i)].length) / Scalar(kept_frames);
  }
  if (kept < num_queries) {
    t.none_pos = int(kept) + 1;
    for (Index i = kept; i < num_queries; ++i) t.future_onehot(i, none) = Scalar(1);
  } else {
    t.none_pos = int(num_queries) + 1;
  }
  return t;
}

// Cross-entropy of softmaxed logits against one-hot rows, summed over rows.
template <typename Scalar>
Scalar seg_loss(const MatrixX<Scalar>& logits, const MatrixX<Scalar>& onehot, bool mean = false) {
  if (logits.rows() != onehot.rows() || logits.cols() != onehot.cols())
    throw DimensionError("seg_loss: shape mismatch");
  const MatrixX<Scalar> logp = log_softmax_rows(logits);
  Scalar loss = -(onehot.cwiseProduct(logp)).sum();
  if (mean && logits.rows() > 0) loss /= Scalar(logits.rows());
  return loss;
}

// d(loss)/d(logits) = softmax - onehot per counted row
template <typename Scalar>
MatrixX<Scalar> seg_loss_backward(const MatrixX<Scalar>& logits, const MatrixX<Scalar>& onehot,
                                  bool mean = false) {
  MatrixX<Scalar> g = softmax_rows(logits) - onehot;
  if (mean && logits.rows() > 0) g /= Scalar(logits.rows());
  return g;
}

// Future-class cross-entropy over query positions i <= none_pos (1-based);
// rows beyond the stop position are never read.
template <typename Scalar>
Scalar class_loss(const MatrixX<Scalar>& logits, const MatrixX<Scalar>& onehot, int none_pos,
                  bool mean = false) {
  if (logits.rows() != onehot.rows() || logits.cols() != onehot.cols())
    throw DimensionError("class_loss: shape mismatch");
  const Index counted = std::min<Index>(Index(none_pos), logits.rows());
  Scalar loss = 0;
  if (counted > 0) {
    const MatrixX<Scalar> logp = log_softmax_rows(MatrixX<Scalar>(logits.topRows(counted)));
    loss = -(onehot.topRows(counted).cwiseProduct(logp)).sum();
    if (mean) loss /= Scalar(counted);
  }
  return loss;
}

template <typename Scalar>
MatrixX<Scalar> class_loss_backward(const MatrixX<Scalar>& logits, const MatrixX<Scalar>& onehot,
                                    int none_pos, bool mean = false) {
  MatrixX<Scalar> g = MatrixX<Scalar>::Zero(logits.rows(), logits.cols());
  const Index counted = std::min<Index>(Index(none_pos), logits.rows());
  if (counted > 0) {
    g.topRows(counted) = softmax_rows(MatrixX<Scalar>(logits.topRows(counted))) -
                         onehot.topRows(counted);
    if (mean) g /= Scalar(counted);
  }
  return g;
}

// Squared duration error over query positions i < none_pos (strictly before
// the stop query).
template <typename Scalar>
Scalar dur_loss(const VectorX<Scalar>& predicted, const VectorX<Scalar>& target, int none_pos,
                bool mean = false) {
  if (predicted.size() != target.size()) throw DimensionError("dur_loss: length mismatch");
  const Index counted = std::min<Index>(Index(none_pos) - 1, predicted.size());
  Scalar loss = 0;
  for (Index i = 0; i < counted; ++i) {
    const Scalar d = target(i) - predicted(i);
    loss += d * d;
  }
  if (mean && counted > 0) loss /= Scalar(counted);
  return loss;
}

template <typename Scalar>
VectorX<Scalar> dur_loss_backward(const VectorX<Scalar>& predicted, const VectorX<Scalar>& target,
                                  int none_pos, bool mean = false) {
  VectorX<Scalar> g = VectorX<Scalar>::Zero(predicted.size());
  const Index counted = std::min<Index>(Index(none_pos) - 1, predicted.size());
  for (Index i = 0; i < counted; ++i) g(i) = Scalar(2) * (predicted(i) - target(i));
  if (mean && counted > 0) g /= Scalar(counted);
  return g;
}

// L_total = L_V + L_T + L_A + L_D, each term unweighted. disable_text drops
// the text segmentation term.
template <typename Scalar>
LossBreakdown<Scalar> total_loss(const PredictionPack<Scalar>& pack,
                                 const TargetPack<Scalar>& targets, bool disable_text = false,
                                 bool mean = false) {
  LossBreakdown<Scalar> out;
  out.text = disable_text ? Scalar(0) : seg_loss(pack.past_text_logits, targets.past_onehot, mean);
  out.vision = seg_loss(pack.past_vision_logits, targets.past_onehot, mean);
  out.future_class =
      class_loss(pack.future_class_logits, targets.future_onehot, targets.none_pos, mean);
  out.duration = dur_loss(pack.durations, targets.durations, targets.none_pos, mean);
  out.total = out.text + out.vision + out.future_class + out.duration;
  return out;
}

template <typename Scalar>
PredictionGrads<Scalar> total_loss_backward(const PredictionPack<Scalar>& pack,
                                            const TargetPack<Scalar>& targets,
                                            bool disable_text = false, bool mean = false) {
  PredictionGrads<Scalar> g;
  g.past_text_logits =
      disable_text
          ? MatrixX<Scalar>::Zero(pack.past_text_logits.rows(), pack.past_text_logits.cols())
          : seg_loss_backward(pack.past_text_logits, targets.past_onehot, mean);
  g.past_vision_logits = seg_loss_backward(pack.past_vision_logits, targets.past_onehot, mean);
  g.future_class_logits =
      class_loss_backward(pack.future_class_logits, targets.future_onehot, targets.none_pos, mean);
  g.durations = dur_loss_backward(pack.durations, targets.durations, targets.none_pos, mean);
  return g;
}

}  // namespace lta
