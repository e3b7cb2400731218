#pragma once

// Training: first/second-moment (Adam-style) updates over the trainable
// parameters only, one sampled observation per step, deterministic under the
// run seed. Keeps the best-validation parameter snapshot and restores it when
// training finishes.

#include <algorithm>
#include <cstring>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lta/backbone.hpp"
#include "lta/config.hpp"
#include "lta/datapipe.hpp"
#include "lta/objective.hpp"
#include "lta/types.hpp"

namespace lta {

template <typename Scalar>
class AdamOptimizer {
 public:
  AdamOptimizer(Model<Scalar>& model, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    model.visit_params([&](const std::string&, Param<Scalar>& p) {
      if (!p.trainable) return;
      slots_.push_back({&p, MatrixX<Scalar>::Zero(p.rows(), p.cols()),
                        MatrixX<Scalar>::Zero(p.rows(), p.cols())});
    });
  }

  void step() {
    ++t_;
    const Scalar b1 = Scalar(beta1_), b2 = Scalar(beta2_);
    const Scalar corr1 = Scalar(1) / Scalar(1 - std::pow(beta1_, t_));
    const Scalar corr2 = Scalar(1) / Scalar(1 - std::pow(beta2_, t_));
    for (auto& s : slots_) {
      const MatrixX<Scalar>& g = s.param->grad;
      s.m = b1 * s.m + (Scalar(1) - b1) * g;
      s.v = b2 * s.v + (Scalar(1) - b2) * g.cwiseProduct(g);
      s.param->value.array() -= Scalar(lr_) * (s.m.array() * corr1) /
                                ((s.v.array() * corr2).sqrt() + Scalar(eps_));
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  int steps() const { return t_; }

 private:
  struct Slot {
    Param<Scalar>* param;
    MatrixX<Scalar> m, v;
  };
  std::vector<Slot> slots_;
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
};

// Scales all trainable gradients down to the given global L2 norm when they
// exceed it.
template <typename Scalar>
void clip_gradients(Model<Scalar>& model, double max_norm) {
  if (max_norm <= 0) return;
  double sq = 0;
  model.visit_params([&](const std::string&, Param<Scalar>& p) {
    if (p.trainable) sq += double(p.grad.squaredNorm());
  });
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const Scalar scale = Scalar(max_norm / norm);
  model.visit_params([&](const std::string&, Param<Scalar>& p) {
    if (p.trainable) p.grad *= scale;
  });
}

// ---------------------------------------------------------------------------
// freeze audit

template <typename Scalar>
std::map<std::string, MatrixX<Scalar>> snapshot_frozen(Model<Scalar>& model) {
  std::map<std::string, MatrixX<Scalar>> snap;
  model.visit_params([&](const std::string& name, Param<Scalar>& p) {
    if (!p.trainable) snap.emplace(name, p.value);
  });
  return snap;
}

template <typename Scalar>
void verify_frozen(Model<Scalar>& model, const std::map<std::string, MatrixX<Scalar>>& snap) {
  model.visit_params([&](const std::string& name, Param<Scalar>& p) {
    if (p.trainable) return;
    const auto it = snap.find(name);
    if (it == snap.end() || it->second.rows() != p.rows() || it->second.cols() != p.cols() ||
        std::memcmp(it->second.data(), p.value.data(), sizeof(Scalar) * size_t(p.size())) != 0)
      throw IntegrityError("freeze audit: frozen parameter '" + name + "' changed");
    if (p.grad.cwiseAbs().maxCoeff() != Scalar(0))
      throw IntegrityError("freeze audit: frozen parameter '" + name + "' accumulated gradient");
  });
}

// ---------------------------------------------------------------------------
// training loop

template <typename Scalar>
struct EpochStats {
  LossBreakdown<Scalar> mean_train;  // averaged over steps
  double val_total = 0;              // mean eval-mode total on held-out videos
  int steps = 0;
};

template <typename Scalar>
struct TrainResult {
  std::vector<EpochStats<Scalar>> history;
  int best_epoch = -1;
  double best_val = 0;
  std::map<std::string, MatrixX<Scalar>> best_values;  // trainable params only
};

template <typename Scalar>
void apply_param_snapshot(Model<Scalar>& model,
                          const std::map<std::string, MatrixX<Scalar>>& values) {
  model.visit_params([&](const std::string& name, Param<Scalar>& p) {
    const auto it = values.find(name);
    if (it != values.end()) p.value = it->second;
  });
}

struct TrainSample {
  size_t video = 0;
  double alpha = 0;
};

// One gradient step on one sampled observation. Exposed for tests.
template <typename Scalar>
LossBreakdown<Scalar> train_step(Model<Scalar>& model, AdamOptimizer<Scalar>& opt,
                                 const VideoRecord<Scalar>& video, const ObservationSpec& spec,
                                 const RunConfig& cfg, Rng& rng) {
  const Observation<Scalar> obs = sample_observation(video, spec);

  SampleInput<Scalar> input;
  input.past_labels = obs.predicted_labels ? *obs.predicted_labels : obs.gt_labels;
  if (cfg.noise_p > 0)
    input.past_labels =
        inject_label_noise(input.past_labels, cfg.noise_p, model.vocab.num_classes(), rng);
  input.features = obs.features;

  const TargetPack<Scalar> targets = build_targets<Scalar>(
      obs.gt_labels, obs.horizon, model.cfg.num_queries, obs.horizon_frames, model.vocab);

  model.zero_grads();
  ForwardTrace<Scalar> trace;
  const PredictionPack<Scalar> pack = model_forward(model, input, /*train_mode=*/true, &rng, &trace);
  const LossBreakdown<Scalar> loss = total_loss(pack, targets, model.cfg.disable_text, cfg.loss_mean);
  if (!std::isfinite(double(loss.total))) {
    std::ostringstream os;
    os << "non-finite loss on video '" << video.id << "' (alpha=" << spec.alpha
       << ", start=" << spec.start << "): text=" << loss.text << " vision=" << loss.vision
       << " class=" << loss.future_class << " duration=" << loss.duration;
    throw NumericError(os.str());
  }
  const PredictionGrads<Scalar> grads =
      total_loss_backward(pack, targets, model.cfg.disable_text, cfg.loss_mean);
  model_backward(model, input, trace, pack, grads);
  clip_gradients(model, cfg.grad_clip);
  opt.step();
  return loss;
}

template <typename Scalar>
double validation_loss(Model<Scalar>& model, const std::vector<VideoRecord<Scalar>>& videos,
                       const std::vector<size_t>& val_idx, const RunConfig& cfg) {
  double total = 0;
  int samples = 0;
  for (size_t vi : val_idx) {
    const auto& video = videos[vi];
    for (double alpha : cfg.train_alphas) {
      ObservationSpec spec{alpha, cfg.train_beta, cfg.sample_rate, 0};
      if (ratio_floor(alpha, video.frames()) / spec.rate < 1) continue;
      const Observation<Scalar> obs = sample_observation(video, spec);
      SampleInput<Scalar> input;
      input.past_labels = obs.predicted_labels ? *obs.predicted_labels : obs.gt_labels;
      input.features = obs.features;
      const TargetPack<Scalar> targets = build_targets<Scalar>(
          obs.gt_labels, obs.horizon, model.cfg.num_queries, obs.horizon_frames, model.vocab);
      const PredictionPack<Scalar> pack = model_forward(model, input);
      total += double(total_loss(pack, targets, model.cfg.disable_text, cfg.loss_mean).total);
      ++samples;
    }
  }
  return samples > 0 ? total / samples : 0.0;
}

template <typename Scalar>
TrainResult<Scalar> train_model(Model<Scalar>& model, const std::vector<VideoRecord<Scalar>>& videos,
                                const RunConfig& cfg, std::ostream* log = nullptr,
                                bool restore_best = true) {
  if (videos.empty()) throw InputError("train: no videos");

  // held-out tail for best-checkpoint selection
  std::vector<size_t> order(videos.size());
  std::iota(order.begin(), order.end(), size_t(0));
  Rng split_rng(derive_seed(model.cfg.seed, fnv1a64("val_split")));
  std::shuffle(order.begin(), order.end(), split_rng);
  size_t val_count = size_t(double(videos.size()) * cfg.val_fraction);
  if (val_count == 0 && videos.size() >= 2) val_count = 1;
  const std::vector<size_t> val_idx(order.end() - std::ptrdiff_t(val_count), order.end());
  const std::vector<size_t> train_idx(order.begin(), order.end() - std::ptrdiff_t(val_count));

  AdamOptimizer<Scalar> opt(model, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  Rng rng(derive_seed(model.cfg.seed, fnv1a64("train_loop")));

  const auto frozen_before = cfg.freeze_audit ? snapshot_frozen(model)
                                              : std::map<std::string, MatrixX<Scalar>>{};

  TrainResult<Scalar> result;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.lr_schedule == "cosine") {
      // one linear warmup epoch, then cosine decay to 5% of the base rate
      const double progress = cfg.epochs > 1 ? double(epoch) / double(cfg.epochs - 1) : 0.0;
      const double warmup = epoch == 0 ? 0.5 : 1.0;
      opt.set_lr(cfg.lr * warmup *
                 (0.05 + 0.95 * 0.5 * (1.0 + std::cos(progress * 3.14159265358979))));
    }
    std::vector<TrainSample> samples;
    for (size_t vi : train_idx)
      for (double alpha : cfg.train_alphas) samples.push_back({vi, alpha});
    std::shuffle(samples.begin(), samples.end(), rng);

    EpochStats<Scalar> stats;
    for (const auto& s : samples) {
      const auto& video = videos[s.video];
      const int start =
          cfg.start_max > 0 ? int(std::uniform_int_distribution<int>(0, cfg.start_max)(rng)) : 0;
      ObservationSpec spec{s.alpha, cfg.train_beta, cfg.sample_rate, start};
      if (ratio_floor(s.alpha, video.frames()) / spec.rate < 1) continue;  // too short
      const LossBreakdown<Scalar> loss = train_step(model, opt, video, spec, cfg, rng);
      stats.mean_train.text += loss.text;
      stats.mean_train.vision += loss.vision;
      stats.mean_train.future_class += loss.future_class;
      stats.mean_train.duration += loss.duration;
      stats.mean_train.total += loss.total;
      ++stats.steps;
    }
    if (stats.steps > 0) {
      stats.mean_train.text /= Scalar(stats.steps);
      stats.mean_train.vision /= Scalar(stats.steps);
      stats.mean_train.future_class /= Scalar(stats.steps);
      stats.mean_train.duration /= Scalar(stats.steps);
      stats.mean_train.total /= Scalar(stats.steps);
    }
    stats.val_total = validation_loss(model, videos, val_idx, cfg);

    if (result.best_epoch < 0 || stats.val_total < result.best_val) {
      result.best_epoch = epoch;
      result.best_val = stats.val_total;
      result.best_values.clear();
      model.visit_params([&](const std::string& name, Param<Scalar>& p) {
        if (p.trainable) result.best_values.emplace(name, p.value);
      });
    }

    if (log)
      *log << "epoch " << epoch + 1 << "/" << cfg.epochs << " train_total=" << stats.mean_train.total
           << " (text=" << stats.mean_train.text << " vision=" << stats.mean_train.vision
           << " class=" << stats.mean_train.future_class
           << " duration=" << stats.mean_train.duration << ") val_total=" << stats.val_total
           << "\n";
    result.history.push_back(stats);
  }

  if (cfg.freeze_audit) verify_frozen(model, frozen_before);

  if (restore_best && !result.best_values.empty()) apply_param_snapshot(model, result.best_values);
  return result;
}

}  // namespace lta
