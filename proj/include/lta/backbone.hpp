#pragma once

// Backbone assembly: concatenate the three adapted streams with residuals,
// apply the action-tuning bottleneck, run the frozen causal transformer stub
// standing in for the language-model backbone, and decode hidden states
// through linear past/future heads. Also owns the whole-model aggregate with
// its parameter visitor.

#include <array>
#include <string>
#include <vector>

#include "lta/adapters.hpp"
#include "lta/cmib.hpp"
#include "lta/config.hpp"
#include "lta/kernels.hpp"
#include "lta/types.hpp"

namespace lta {

// ---------------------------------------------------------------------------
// action tuning (position-wise linear bottleneck with dropout, kernel size 1)

template <typename Scalar>
struct TuningWeights {
  Param<Scalar> w0, b0, w1, b1;
  Scalar dropout_rate = Scalar(0);

  TuningWeights() = default;
  TuningWeights(Index embed_dim, Index mid_dim, Scalar dropout)
      : w0(embed_dim, mid_dim), b0(1, mid_dim), w1(mid_dim, embed_dim), b1(1, embed_dim),
        dropout_rate(dropout) {}

  void init_random(Rng& rng) {
    w0.value = random_normal<Scalar>(w0.rows(), w0.cols(),
                                     Scalar(1) / std::sqrt(Scalar(w0.rows())), rng);
    w1.value = random_normal<Scalar>(w1.rows(), w1.cols(),
                                     Scalar(1) / std::sqrt(Scalar(w1.rows())), rng);
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".w0", w0);
    fn(prefix + ".b0", b0);
    fn(prefix + ".w1", w1);
    fn(prefix + ".b1", b1);
  }
};

// Inverted-dropout mask: zero with probability rate, else 1/(1-rate).
template <typename Scalar>
MatrixX<Scalar> dropout_mask(Index rows, Index cols, Scalar rate, Rng& rng) {
  if (rate >= Scalar(1)) return MatrixX<Scalar>::Zero(rows, cols);
  MatrixX<Scalar> mask(rows, cols);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  const Scalar keep_scale = Scalar(1) / (Scalar(1) - rate);
  for (Index i = 0; i < mask.size(); ++i)
    mask(i) = dist(rng) < double(rate) ? Scalar(0) : keep_scale;
  return mask;
}

// out = W1 * Dropout(W0 * F + b0) + b1. Dropout only in train mode; pass
// mask_out to retain the drawn mask for the backward pass.
template <typename Scalar>
MatrixX<Scalar> action_tuning(const MatrixX<Scalar>& f, const TuningWeights<Scalar>& t,
                              bool train_mode, Rng* rng = nullptr,
                              MatrixX<Scalar>* mask_out = nullptr) {
  MatrixX<Scalar> z = linear(f, t.w0, t.b0);
  if (train_mode && t.dropout_rate > Scalar(0)) {
    if (!rng) throw InputError("action_tuning: train mode with dropout needs an rng");
    const MatrixX<Scalar> mask = dropout_mask<Scalar>(z.rows(), z.cols(), t.dropout_rate, *rng);
    z = z.cwiseProduct(mask);
    if (mask_out) *mask_out = mask;
  } else if (mask_out) {
    mask_out->resize(0, 0);
  }
  return linear(z, t.w1, t.b1);
}

// mask empty -> dropout was inactive in the forward pass
template <typename Scalar>
MatrixX<Scalar> action_tuning_backward(const MatrixX<Scalar>& g, const MatrixX<Scalar>& f,
                                       TuningWeights<Scalar>& t, const MatrixX<Scalar>& mask) {
  MatrixX<Scalar> z = linear(f, t.w0, t.b0);
  const bool dropped = mask.size() != 0;
  const MatrixX<Scalar> z_used = dropped ? MatrixX<Scalar>(z.cwiseProduct(mask)) : z;
  MatrixX<Scalar> gz = linear_backward(g, z_used, t.w1, &t.b1);
  if (dropped) gz = gz.cwiseProduct(mask);
  return linear_backward(gz, f, t.w0, &t.b0);
}

// ---------------------------------------------------------------------------
// frozen transformer stub

template <typename Scalar>
struct StubLayer {
  RmsNormParams<Scalar> norm1, norm2;
  AttentionWeights<Scalar> attn;
  FfnWeights<Scalar> ffn;
};

template <typename Scalar>
struct FrozenStub {
  std::vector<StubLayer<Scalar>> layers;
  std::uint64_t seed = 0;

  static FrozenStub make(Index depth, Index width, Index num_heads, Index ffn_dim, Scalar eps,
                         std::uint64_t seed, Scalar gain = Scalar(1)) {
    FrozenStub s;
    s.seed = seed;
    Rng rng(derive_seed(seed, fnv1a64("frozen_stub")));
    const Scalar stddev = gain / std::sqrt(Scalar(width));
    for (Index l = 0; l < depth; ++l) {
      StubLayer<Scalar> layer;
      layer.norm1 = RmsNormParams<Scalar>(width, eps, /*trainable=*/false);
      layer.norm2 = RmsNormParams<Scalar>(width, eps, /*trainable=*/false);
      layer.attn = AttentionWeights<Scalar>(width, num_heads, /*trainable=*/false);
      layer.attn.init_random(rng, stddev);
      layer.ffn = FfnWeights<Scalar>(width, ffn_dim, /*trainable=*/false);
      layer.ffn.init_random(rng, stddev);
      s.layers.push_back(std::move(layer));
    }
    return s;
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string lp = prefix + ".layer" + std::to_string(l);
      fn(lp + ".norm1.scale", layers[l].norm1.scale);
      fn(lp + ".norm2.scale", layers[l].norm2.scale);
      layers[l].attn.visit(lp + ".attn", fn);
      layers[l].ffn.visit(lp + ".ffn", fn);
    }
  }
};

template <typename Scalar>
struct StubTrace {
  std::vector<MatrixX<Scalar>> layer_in;   // h before attention
  std::vector<MatrixX<Scalar>> layer_mid;  // h after attention residual
};

// depth x { h += causal_mha(rms(h)); h += ffn(rms(h)) }; depth 0 is identity
template <typename Scalar>
MatrixX<Scalar> stub_forward(const MatrixX<Scalar>& f, const FrozenStub<Scalar>& s,
                             StubTrace<Scalar>* trace = nullptr) {
  MatrixX<Scalar> h = f;
  for (const auto& layer : s.layers) {
    if (trace) trace->layer_in.push_back(h);
    const MatrixX<Scalar> n1 = rms_norm(h, layer.norm1);
    h += mha(n1, n1, layer.attn, /*causal=*/true);
    if (trace) trace->layer_mid.push_back(h);
    h += ffn(rms_norm(h, layer.norm2), layer.ffn);
  }
  return h;
}

template <typename Scalar>
MatrixX<Scalar> stub_backward(const MatrixX<Scalar>& g_out, FrozenStub<Scalar>& s,
                              const StubTrace<Scalar>& trace) {
  MatrixX<Scalar> g = g_out;
  for (size_t l = s.layers.size(); l-- > 0;) {
    auto& layer = s.layers[l];
    const MatrixX<Scalar>& h_in = trace.layer_in[l];
    const MatrixX<Scalar>& h_mid = trace.layer_mid[l];

    const MatrixX<Scalar> n2 = rms_norm(h_mid, layer.norm2);
    const MatrixX<Scalar> g_n2 = ffn_backward(g, n2, layer.ffn);
    const MatrixX<Scalar> g_mid = g + rms_norm_backward(g_n2, h_mid, layer.norm2);

    const MatrixX<Scalar> n1 = rms_norm(h_in, layer.norm1);
    MatrixX<Scalar> g_n1 = MatrixX<Scalar>::Zero(n1.rows(), n1.cols());
    mha_backward(g_mid, n1, n1, layer.attn, g_n1, g_n1, /*causal=*/true);
    g = g_mid + rms_norm_backward(g_n1, h_in, layer.norm1);
  }
  return g;
}

// ---------------------------------------------------------------------------
// output heads

template <typename Scalar>
struct Heads {
  Param<Scalar> past_text;     // embed_dim x K
  Param<Scalar> past_vision;   // embed_dim x K (unused when shared)
  Param<Scalar> future_class;  // embed_dim x (K+1)
  Param<Scalar> future_dur;    // embed_dim x 1
  bool shared_past = false;

  Heads() = default;
  Heads(Index embed_dim, Index num_classes, bool shared)
      : past_text(embed_dim, num_classes),
        past_vision(shared ? 0 : embed_dim, shared ? 0 : num_classes),
        future_class(embed_dim, num_classes + 1),
        future_dur(embed_dim, 1),
        shared_past(shared) {}

  Param<Scalar>& vision_head() { return shared_past ? past_text : past_vision; }
  const Param<Scalar>& vision_head() const { return shared_past ? past_text : past_vision; }

  void init_random(Rng& rng) {
    const Scalar stddev = Scalar(1) / std::sqrt(Scalar(past_text.rows()));
    past_text.value = random_normal<Scalar>(past_text.rows(), past_text.cols(), stddev, rng);
    if (!shared_past)
      past_vision.value =
          random_normal<Scalar>(past_vision.rows(), past_vision.cols(), stddev, rng);
    future_class.value =
        random_normal<Scalar>(future_class.rows(), future_class.cols(), stddev, rng);
    future_dur.value = random_normal<Scalar>(future_dur.rows(), future_dur.cols(), stddev, rng);
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".past_text", past_text);
    if (!shared_past) fn(prefix + ".past_vision", past_vision);
    fn(prefix + ".future_class", future_class);
    fn(prefix + ".future_dur", future_dur);
  }
};

template <typename Scalar>
struct PredictionPack {
  MatrixX<Scalar> past_text_logits;     // theta0 x K
  MatrixX<Scalar> past_vision_logits;   // theta0 x K
  MatrixX<Scalar> future_class_logits;  // N x (K+1)
  VectorX<Scalar> duration_raw;         // N, pre-softplus
  VectorX<Scalar> durations;            // N, softplus(raw) >= 0
};

// Hidden rows split by the assembly order: [0,theta0) text, [theta0, 2*theta0)
// vision, last N queries.
template <typename Scalar>
PredictionPack<Scalar> apply_heads(const MatrixX<Scalar>& hidden, const Heads<Scalar>& heads,
                                   Index theta0, Index num_queries) {
  if (hidden.rows() != 2 * theta0 + num_queries)
    throw DimensionError("apply_heads: hidden rows != 2*theta0 + N");
  PredictionPack<Scalar> pack;
  const auto text_rows = hidden.topRows(theta0);
  const auto vision_rows = hidden.middleRows(theta0, theta0);
  const auto query_rows = hidden.bottomRows(num_queries);
  pack.past_text_logits = text_rows * heads.past_text.value;
  pack.past_vision_logits = vision_rows * heads.vision_head().value;
  pack.future_class_logits = query_rows * heads.future_class.value;
  pack.duration_raw = query_rows * heads.future_dur.value;
  pack.durations = pack.duration_raw.unaryExpr([](Scalar z) { return softplus(z); });
  return pack;
}

// ---------------------------------------------------------------------------
// whole model

template <typename Scalar>
struct Model {
  ModelConfig cfg;
  Vocabulary vocab;
  EmbeddingTable<Scalar> embedding;
  AdapterWeights<Scalar> adapter;
  Projections<Scalar> projections;
  QueryBank<Scalar> queries;
  CmibParams<Scalar> cmib;
  RmsNormParams<Scalar> assemble_norm;
  TuningWeights<Scalar> tuning;
  FrozenStub<Scalar> stub;
  Heads<Scalar> heads;

  static Model build(ModelConfig cfg, Vocabulary vocab) {
    cfg.finalize();
    if (cfg.num_classes < 1) throw InputError("model: num_classes must be >= 1");
    if (cfg.num_classes != vocab.num_classes())
      throw InputError("model: config num_classes != vocabulary size");

    Model m;
    m.cfg = cfg;
    m.vocab = std::move(vocab);
    m.vocab.token_buckets = cfg.token_buckets;
    m.embedding = EmbeddingTable<Scalar>::make(cfg.token_buckets, cfg.embed_dim, cfg.frozen_seed);

    Rng rng(derive_seed(cfg.seed, fnv1a64("trainable_init")));
    m.adapter = AdapterWeights<Scalar>(cfg.feature_dim, cfg.adapter_mid, cfg.embed_dim);
    m.adapter.init_random(rng);
    m.projections = Projections<Scalar>(cfg.embed_dim, cfg.cmib_dim, cfg.shared_projections);
    m.projections.init_random(rng);
    m.queries =
        init_query_bank<Scalar>(cfg.num_queries, cfg.feature_dim, Scalar(cfg.query_init));
    m.cmib = CmibParams<Scalar>(cfg.cmib_dim, cfg.cmib_heads, cfg.cmib_ffn_dim, cfg.cmib_depth,
                                Scalar(cfg.rms_eps));
    m.cmib.init_random(rng, Scalar(1) / std::sqrt(Scalar(cfg.cmib_dim)));
    m.assemble_norm = RmsNormParams<Scalar>(cfg.embed_dim, Scalar(cfg.rms_eps));
    m.tuning = TuningWeights<Scalar>(cfg.embed_dim, cfg.tune_mid, Scalar(cfg.dropout));
    m.tuning.init_random(rng);
    m.stub = FrozenStub<Scalar>::make(cfg.stub_depth, cfg.embed_dim, cfg.stub_heads,
                                      cfg.stub_ffn_dim, Scalar(cfg.rms_eps), cfg.frozen_seed,
                                      Scalar(cfg.stub_gain));
    m.heads = Heads<Scalar>(cfg.embed_dim, cfg.num_classes, cfg.shared_past_head);
    m.heads.init_random(rng);
    return m;
  }

  template <typename Fn>
  void visit_params(Fn&& fn) {
    fn("embedding.table", embedding.table);
    adapter.visit("adapter", fn);
    projections.visit(fn);
    fn("queries", queries.weights);
    cmib.visit("cmib", fn);
    fn("assemble_norm.scale", assemble_norm.scale);
    tuning.visit("tuning", fn);
    stub.visit("stub", fn);
    heads.visit("heads", fn);
  }

  void zero_grads() {
    visit_params([](const std::string&, Param<Scalar>& p) { p.grad.setZero(); });
  }
};

struct ParamCounts {
  std::int64_t learnable = 0;
  std::int64_t frozen = 0;
};

template <typename Scalar>
ParamCounts count_params(Model<Scalar>& model) {
  ParamCounts c;
  model.visit_params([&](const std::string&, Param<Scalar>& p) {
    (p.trainable ? c.learnable : c.frozen) += p.size();
  });
  return c;
}

// ---------------------------------------------------------------------------
// end-to-end forward / backward

template <typename Scalar>
struct SampleInput {
  std::vector<int> past_labels;  // theta0 class ids feeding the text stream
  MatrixX<Scalar> features;      // theta0 x feature_dim
};

template <typename Scalar>
struct ForwardTrace {
  MatrixX<Scalar> f_text, f_vision_ad, f_query_ad;  // embed_dim streams
  std::array<MatrixX<Scalar>, 3> down;              // cmib inputs
  CmibTrace<Scalar> cmib;
  std::array<MatrixX<Scalar>, 3> cmib_out;  // up-projection inputs
  MatrixX<Scalar> concat_pre;               // before the assembly norm
  MatrixX<Scalar> assembled;                // tuning input
  MatrixX<Scalar> tuning_mask;
  MatrixX<Scalar> tuned;  // stub input
  StubTrace<Scalar> stub;
  MatrixX<Scalar> hidden;  // head input
};

// F_M = RMSNorm(Cat(up_t + text, up_v + vision, up_q + query)); row layout is
// load-bearing: the heads read fixed slices.
template <typename Scalar>
MatrixX<Scalar> assemble(const MatrixX<Scalar>& up_t, const MatrixX<Scalar>& f_text,
                         const MatrixX<Scalar>& up_v, const MatrixX<Scalar>& f_vision,
                         const MatrixX<Scalar>& up_q, const MatrixX<Scalar>& f_query,
                         const RmsNormParams<Scalar>& norm,
                         MatrixX<Scalar>* concat_pre = nullptr) {
  if (up_t.rows() != f_text.rows() || up_v.rows() != f_vision.rows() ||
      up_q.rows() != f_query.rows() || up_t.cols() != f_text.cols() ||
      up_v.cols() != f_vision.cols() || up_q.cols() != f_query.cols())
    throw DimensionError("assemble: residual pair shape mismatch");
  MatrixX<Scalar> cat(up_t.rows() + up_v.rows() + up_q.rows(), up_t.cols());
  cat.topRows(up_t.rows()) = up_t + f_text;
  cat.middleRows(up_t.rows(), up_v.rows()) = up_v + f_vision;
  cat.bottomRows(up_q.rows()) = up_q + f_query;
  if (concat_pre) *concat_pre = cat;
  return rms_norm(cat, norm);
}

template <typename Scalar>
PredictionPack<Scalar> model_forward(const Model<Scalar>& model, const SampleInput<Scalar>& in,
                                     bool train_mode = false, Rng* rng = nullptr,
                                     ForwardTrace<Scalar>* trace = nullptr) {
  const Index theta0 = Index(in.past_labels.size());
  if (theta0 < 1) throw InputError("model_forward: empty observation");
  if (in.features.rows() != theta0 || in.features.cols() != model.cfg.feature_dim)
    throw DimensionError("model_forward: feature matrix shape mismatch");

  ForwardTrace<Scalar> local;
  ForwardTrace<Scalar>& tr = trace ? *trace : local;

  tr.f_text = model.cfg.disable_text
                  ? MatrixX<Scalar>::Zero(theta0, model.cfg.embed_dim)
                  : embed_classes<Scalar>(in.past_labels, model.vocab, model.embedding);
  tr.f_vision_ad = adapt_features(in.features, model.adapter);
  tr.f_query_ad = adapt_features(model.queries.weights.value, model.adapter);

  tr.down[0] = project(tr.f_text, model.projections, Modality::text, ProjDir::down);
  tr.down[1] = project(tr.f_vision_ad, model.projections, Modality::vision, ProjDir::down);
  tr.down[2] = project(tr.f_query_ad, model.projections, Modality::query, ProjDir::down);

  tr.cmib_out = cmib_forward(tr.down[0], tr.down[1], tr.down[2], model.cmib,
                             trace ? &tr.cmib : nullptr);

  const MatrixX<Scalar> up_t =
      project(tr.cmib_out[0], model.projections, Modality::text, ProjDir::up);
  const MatrixX<Scalar> up_v =
      project(tr.cmib_out[1], model.projections, Modality::vision, ProjDir::up);
  const MatrixX<Scalar> up_q =
      project(tr.cmib_out[2], model.projections, Modality::query, ProjDir::up);

  tr.assembled = assemble(up_t, tr.f_text, up_v, tr.f_vision_ad, up_q, tr.f_query_ad,
                          model.assemble_norm, &tr.concat_pre);

  tr.tuned = action_tuning(tr.assembled, model.tuning, train_mode, rng, &tr.tuning_mask);
  if (model.cfg.tuning_residual) tr.tuned += tr.assembled;

  tr.hidden = stub_forward(tr.tuned, model.stub, trace ? &tr.stub : nullptr);
  return apply_heads(tr.hidden, model.heads, theta0, model.cfg.num_queries);
}

// Gradients of the loss w.r.t. the prediction pack; durations are w.r.t. the
// softplus output (the chain through softplus happens here).
template <typename Scalar>
struct PredictionGrads {
  MatrixX<Scalar> past_text_logits;
  MatrixX<Scalar> past_vision_logits;
  MatrixX<Scalar> future_class_logits;
  VectorX<Scalar> durations;
};

template <typename Scalar>
void model_backward(Model<Scalar>& model, const SampleInput<Scalar>& in,
                    const ForwardTrace<Scalar>& tr, const PredictionPack<Scalar>& pack,
                    const PredictionGrads<Scalar>& g) {
  const Index theta0 = Index(in.past_labels.size());
  const Index nq = model.cfg.num_queries;

  // heads
  MatrixX<Scalar> g_hidden = MatrixX<Scalar>::Zero(tr.hidden.rows(), tr.hidden.cols());
  const auto text_rows = tr.hidden.topRows(theta0);
  const auto vision_rows = tr.hidden.middleRows(theta0, theta0);
  const auto query_rows = tr.hidden.bottomRows(nq);

  model.heads.past_text.accumulate(text_rows.transpose() * g.past_text_logits);
  g_hidden.topRows(theta0) += g.past_text_logits * model.heads.past_text.value.transpose();
  model.heads.vision_head().accumulate(vision_rows.transpose() * g.past_vision_logits);
  g_hidden.middleRows(theta0, theta0) +=
      g.past_vision_logits * model.heads.vision_head().value.transpose();
  model.heads.future_class.accumulate(query_rows.transpose() * g.future_class_logits);
  g_hidden.bottomRows(nq) += g.future_class_logits * model.heads.future_class.value.transpose();

  VectorX<Scalar> g_dur_raw(nq);
  for (Index i = 0; i < nq; ++i) g_dur_raw(i) = g.durations(i) * sigmoid(pack.duration_raw(i));
  model.heads.future_dur.accumulate(query_rows.transpose() * g_dur_raw);
  g_hidden.bottomRows(nq) += g_dur_raw * model.heads.future_dur.value.transpose();

  // stub
  const MatrixX<Scalar> g_tuned = stub_backward(g_hidden, model.stub, tr.stub);

  // action tuning (+ optional residual)
  MatrixX<Scalar> g_assembled =
      action_tuning_backward(g_tuned, tr.assembled, model.tuning, tr.tuning_mask);
  if (model.cfg.tuning_residual) g_assembled += g_tuned;

  // assembly norm and concat split
  const MatrixX<Scalar> g_concat =
      rms_norm_backward(g_assembled, tr.concat_pre, model.assemble_norm);
  const MatrixX<Scalar> g_text_rows = g_concat.topRows(theta0);
  const MatrixX<Scalar> g_vision_rows = g_concat.middleRows(theta0, theta0);
  const MatrixX<Scalar> g_query_rows = g_concat.bottomRows(nq);

  // up projections (the residual also feeds the pre-down features directly)
  MatrixX<Scalar> g_f_text = g_text_rows;
  MatrixX<Scalar> g_f_vision = g_vision_rows;
  MatrixX<Scalar> g_f_query = g_query_rows;

  std::array<MatrixX<Scalar>, 3> g_cmib_out;
  g_cmib_out[0] = project_backward(g_text_rows, tr.cmib_out[0], model.projections, Modality::text,
                                   ProjDir::up);
  g_cmib_out[1] = project_backward(g_vision_rows, tr.cmib_out[1], model.projections,
                                   Modality::vision, ProjDir::up);
  g_cmib_out[2] = project_backward(g_query_rows, tr.cmib_out[2], model.projections,
                                   Modality::query, ProjDir::up);

  const std::array<MatrixX<Scalar>, 3> g_down = cmib_backward(g_cmib_out, model.cmib, tr.cmib);

  g_f_text +=
      project_backward(g_down[0], tr.f_text, model.projections, Modality::text, ProjDir::down);
  g_f_vision += project_backward(g_down[1], tr.f_vision_ad, model.projections, Modality::vision,
                                 ProjDir::down);
  g_f_query += project_backward(g_down[2], tr.f_query_ad, model.projections, Modality::query,
                                ProjDir::down);

  // adapter, shared between the vision and query paths; the query gradient
  // continues into the trainable query bank, the vision one ends at the input
  // and the text one ends at the frozen embedding
  adapt_features_backward(g_f_vision, in.features, model.adapter);
  const MatrixX<Scalar> g_queries =
      adapt_features_backward(g_f_query, model.queries.weights.value, model.adapter);
  model.queries.weights.accumulate(g_queries);
}

}  // namespace lta
