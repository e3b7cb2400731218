#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "lta/backbone.hpp"
#include "lta/checkpoint.hpp"
#include "lta/gradcheck.hpp"
#include "lta/objective.hpp"
#include "lta/train.hpp"
#include "oracles.hpp"

using namespace lta;
using Mat = MatrixX<double>;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.feature_dim = 6;
  cfg.embed_dim = 8;
  cfg.cmib_dim = 4;
  cfg.adapter_mid = 4;
  cfg.tune_mid = 2;
  cfg.num_queries = 2;
  cfg.cmib_heads = 2;
  cfg.stub_heads = 2;
  cfg.stub_depth = 1;
  cfg.token_buckets = 16;
  cfg.dropout = 0.0;
  cfg.rms_eps = 1e-5;
  cfg.seed = 99;
  return cfg;
}

Vocabulary tiny_vocab() { return Vocabulary::from_names({"pour", "cut", "mix"}, 16); }

SampleInput<double> tiny_sample(Rng& rng, Index theta0 = 3, Index feature_dim = 6) {
  SampleInput<double> s;
  for (Index i = 0; i < theta0; ++i)
    s.past_labels.push_back(std::uniform_int_distribution<int>(0, 2)(rng));
  s.features = random_normal<double>(theta0, feature_dim, 1.0, rng);
  return s;
}

// straight-line recomputation of the whole pipeline from the model's own
// parameters, using the loop-based oracle kernels
Mat oracle_hidden(const Model<double>& m, const SampleInput<double>& in) {
  const Index theta0 = Index(in.past_labels.size());
  const Mat f_t = m.cfg.disable_text ? Mat::Zero(theta0, m.cfg.embed_dim)
                                     : embed_classes<double>(in.past_labels, m.vocab, m.embedding);
  auto adapt = [&](const Mat& f) {
    return oracle::add_bias(
        oracle::matmul(oracle::silu(oracle::add_bias(oracle::matmul(f, m.adapter.w0.value),
                                                     m.adapter.b0.value)),
                       m.adapter.w1.value),
        m.adapter.b1.value);
  };
  const Mat f_v = adapt(in.features);
  const Mat f_q = adapt(m.queries.weights.value);

  std::array<Mat, 3> x = {
      oracle::matmul(f_t, m.projections.pair_for(Modality::text).down.value),
      oracle::matmul(f_v, m.projections.pair_for(Modality::vision).down.value),
      oracle::matmul(f_q, m.projections.pair_for(Modality::query).down.value)};

  for (const auto& block : m.cmib.blocks) {
    std::array<Mat, 3> normed;
    for (int s = 0; s < 3; ++s)
      normed[size_t(s)] =
          oracle::rms_norm(x[size_t(s)] + position_encoding<double>(x[size_t(s)].rows(),
                                                                    m.cfg.cmib_dim),
                           block.pre_norm[size_t(s)]);
    const auto mixed = oracle::cmia(normed[0], normed[1], normed[2], block.cmia);
    for (int s = 0; s < 3; ++s) {
      const Mat o = mixed[size_t(s)] + x[size_t(s)];
      x[size_t(s)] = oracle::ffn(oracle::rms_norm(o, block.post_norm[size_t(s)]),
                                 block.ffn[size_t(s)]) +
                     o;
    }
  }

  Mat cat(2 * theta0 + m.cfg.num_queries, m.cfg.embed_dim);
  cat.topRows(theta0) =
      oracle::matmul(x[0], m.projections.pair_for(Modality::text).up.value) + f_t;
  cat.middleRows(theta0, theta0) =
      oracle::matmul(x[1], m.projections.pair_for(Modality::vision).up.value) + f_v;
  cat.bottomRows(m.cfg.num_queries) =
      oracle::matmul(x[2], m.projections.pair_for(Modality::query).up.value) + f_q;
  Mat fm = oracle::rms_norm(cat, m.assemble_norm);
  fm = oracle::add_bias(
      oracle::matmul(oracle::add_bias(oracle::matmul(fm, m.tuning.w0.value), m.tuning.b0.value),
                     m.tuning.w1.value),
      m.tuning.b1.value);

  Mat h = fm;
  for (const auto& layer : m.stub.layers) {
    const Mat n1 = oracle::rms_norm(h, layer.norm1);
    h = h + oracle::mha(n1, n1, layer.attn, /*causal=*/true);
    h = h + oracle::ffn(oracle::rms_norm(h, layer.norm2), layer.ffn);
  }
  return h;
}

}  // namespace

TEST_CASE("assemble: residual identity, row count, slice order") {
  RmsNormParams<double> norm(4, 1e-6);
  Rng rng(3);
  const Mat ft = random_normal<double>(2, 4, 1.0, rng);
  const Mat fv = random_normal<double>(2, 4, 1.0, rng);
  const Mat fq = random_normal<double>(3, 4, 1.0, rng);
  const Mat zt = Mat::Zero(2, 4), zq = Mat::Zero(3, 4);

  const Mat out = assemble(zt, ft, zt, fv, zq, fq, norm);
  CHECK(out.rows() == 7);  // 2*theta0 + N

  Mat cat(7, 4);
  cat << ft, fv, fq;
  CHECK(out.isApprox(rms_norm(cat, norm), 1e-12));

  Mat cat_check;
  assemble(zt, ft, zt, fv, zq, fq, norm, &cat_check);
  CHECK(cat_check.topRows(2) == ft);
  CHECK(cat_check.middleRows(2, 2) == fv);
  CHECK(cat_check.bottomRows(3) == fq);

  const Mat wrong = Mat::Zero(3, 4);
  CHECK_THROWS_AS(assemble(wrong, ft, zt, fv, zq, fq, norm), DimensionError);
}

TEST_CASE("action_tuning: zero weights, dropout limiting cases") {
  TuningWeights<double> zero(4, 2, 0.0);
  const Mat f = Mat::Ones(3, 4);
  CHECK(action_tuning(f, zero, false).isZero(0));

  Rng rng(5);
  TuningWeights<double> t(4, 2, 0.0);
  t.init_random(rng);
  t.b0.value = random_normal<double>(1, 2, 0.5, rng);
  t.b1.value = random_normal<double>(1, 4, 0.5, rng);

  // eval mode equals train mode at dropout rate 0
  Rng drop_rng(1);
  CHECK(action_tuning(f, t, true, &drop_rng) == action_tuning(f, t, false));

  // rate 1 drops every bottleneck activation: output is the bias broadcast
  t.dropout_rate = 1.0;
  const Mat out = action_tuning(f, t, true, &drop_rng);
  for (Index i = 0; i < out.rows(); ++i) CHECK(out.row(i).isApprox(t.b1.value.row(0), 1e-12));
}

TEST_CASE("action_tuning: gradient check through the dropout mask") {
  Rng rng(7);
  TuningWeights<double> t(4, 2, 0.5);
  t.init_random(rng);
  Param<double> xin(3, 4);
  xin.value = random_normal<double>(3, 4, 1.0, rng);
  const Mat proj = random_normal<double>(3, 4, 1.0, rng);

  // draw one mask and keep it fixed while differentiating
  Rng mask_rng(11);
  const Mat mask = dropout_mask<double>(3, 2, 0.5, mask_rng);
  auto forward = [&] {
    const Mat z = linear(xin.value, t.w0, t.b0).cwiseProduct(mask);
    return linear(z, t.w1, t.b1);
  };
  auto loss_only = [&] { return forward().cwiseProduct(proj).sum(); };
  auto loss_and_grad = [&] {
    const Mat out = forward();
    xin.accumulate(action_tuning_backward(proj, xin.value, t, mask));
    return out.cwiseProduct(proj).sum();
  };
  auto visit = [&](auto&& fn) {
    t.visit("tuning", fn);
    fn("x", xin);
  };
  CHECK(grad_check(loss_and_grad, loss_only, visit).max_rel_err < 1e-6);
}

TEST_CASE("stub_forward: depth 0 identity, causality, determinism") {
  Rng rng(9);
  const Mat f = random_normal<double>(4, 6, 1.0, rng);

  const auto empty = FrozenStub<double>::make(0, 6, 2, 8, 1e-5, 1);
  CHECK(stub_forward(f, empty) == f);

  const auto stub = FrozenStub<double>::make(2, 6, 2, 8, 1e-5, 1);
  const Mat base = stub_forward(f, stub);

  // perturbing row j changes only output rows >= j
  for (Index j = 0; j < 4; ++j) {
    Mat fp = f;
    fp.row(j).array() += 0.25;
    const Mat out = stub_forward(fp, stub);
    for (Index i = 0; i < j; ++i) CHECK(out.row(i).isApprox(base.row(i), 1e-12));
    CHECK((out.row(j) - base.row(j)).cwiseAbs().maxCoeff() > 1e-9);
  }

  const auto again = FrozenStub<double>::make(2, 6, 2, 8, 1e-5, 1);
  CHECK(stub_forward(f, again) == base);

  // every parameter is frozen
  auto copy = stub;
  copy.visit("stub", [](const std::string&, Param<double>& p) { CHECK_FALSE(p.trainable); });
}

TEST_CASE("apply_heads: shapes, zero case, row locality") {
  Heads<double> heads(8, 4, false);
  const Index theta0 = 2, n = 3;
  const Mat h = Mat::Zero(2 * theta0 + n, 8);
  const auto pack = apply_heads(h, heads, theta0, n);
  CHECK(pack.past_text_logits.rows() == 2);
  CHECK(pack.past_text_logits.cols() == 4);
  CHECK(pack.past_vision_logits.rows() == 2);
  CHECK(pack.future_class_logits.rows() == 3);
  CHECK(pack.future_class_logits.cols() == 5);
  CHECK(pack.durations.size() == 3);
  CHECK(pack.past_text_logits.isZero(0));
  for (Index i = 0; i < n; ++i)
    CHECK(pack.durations(i) == doctest::Approx(std::log(2.0)));  // softplus(0)

  Rng rng(13);
  heads.init_random(rng);
  Mat hr = random_normal<double>(2 * theta0 + n, 8, 1.0, rng);
  const auto base = apply_heads(hr, heads, theta0, n);
  hr.row(0).array() += 1.0;
  const auto perturbed = apply_heads(hr, heads, theta0, n);
  CHECK((perturbed.past_text_logits.row(0) - base.past_text_logits.row(0)).cwiseAbs().maxCoeff() >
        1e-9);
  CHECK(perturbed.past_text_logits.row(1).isApprox(base.past_text_logits.row(1), 1e-12));
  CHECK(perturbed.past_vision_logits.isApprox(base.past_vision_logits, 1e-12));
  CHECK(perturbed.future_class_logits.isApprox(base.future_class_logits, 1e-12));

  const Mat short_hidden = Mat::Zero(5, 8);
  CHECK_THROWS_AS(apply_heads(short_hidden, heads, 2, 2), DimensionError);
}

TEST_CASE("model_forward: shape audit and eval determinism") {
  auto model = Model<double>::build(tiny_config(), tiny_vocab());
  Rng rng(17);
  const auto sample = tiny_sample(rng);

  const auto pack = model_forward(model, sample);
  CHECK(pack.past_text_logits.rows() == 3);
  CHECK(pack.past_text_logits.cols() == 3);
  CHECK(pack.past_vision_logits.rows() == 3);
  CHECK(pack.future_class_logits.rows() == 2);
  CHECK(pack.future_class_logits.cols() == 4);
  CHECK(pack.durations.size() == 2);

  const auto pack2 = model_forward(model, sample);
  CHECK(pack.past_text_logits == pack2.past_text_logits);
  CHECK(pack.future_class_logits == pack2.future_class_logits);
  CHECK(pack.durations == pack2.durations);
}

TEST_CASE("model_forward: matches the straight-line oracle pipeline") {
  Rng rng(19);
  for (int it = 0; it < 5; ++it) {
    ModelConfig cfg = tiny_config();
    cfg.seed = 100 + std::uint64_t(it);
    auto model = Model<double>::build(cfg, tiny_vocab());
    const auto sample = tiny_sample(rng);

    const auto pack = model_forward(model, sample);
    const Mat hidden = oracle_hidden(model, sample);
    const Mat t_hat = oracle::matmul(hidden.topRows(3), model.heads.past_text.value);
    const Mat a_hat =
        oracle::matmul(hidden.bottomRows(2), model.heads.future_class.value);
    CHECK((pack.past_text_logits - t_hat).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((pack.future_class_logits - a_hat).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("count_params: hand enumeration at tiny dims, monotonicity, freeze split") {
  ModelConfig cfg = tiny_config();
  cfg.stub_depth = 0;
  cfg.adapter_mid = 4;  // L_MF
  auto model = Model<double>::build(cfg, tiny_vocab());
  const auto counts = count_params(model);

  // hand enumeration at L_E=8, d_c=4, L_MA=2, K=3, N=2, L_D=6, L_MF=4, V=16, h=2
  const std::int64_t adapter = 6 * 4 + 4 + 4 * 8 + 8;
  const std::int64_t projections = 3 * (8 * 4 + 4 * 8);
  const std::int64_t queries = 2 * 6;
  const std::int64_t cmia = 9 * (2 * 3 * (4 * 2) + 4 * 4);
  const std::int64_t cmib_norms = 6 * 4;
  const std::int64_t cmib_ffn = 3 * (4 * 16 + 16 + 16 * 4 + 4);
  const std::int64_t assemble_n = 8;
  const std::int64_t tuning = 8 * 2 + 2 + 2 * 8 + 8;
  const std::int64_t heads = 8 * 3 + 8 * 3 + 8 * 4 + 8 * 1;
  CHECK(counts.learnable == adapter + projections + queries + cmia + cmib_norms + cmib_ffn +
                                assemble_n + tuning + heads);
  CHECK(counts.frozen == 16 * 8);  // embedding only at stub depth 0

  ModelConfig wider = cfg;
  wider.cmib_dim = 8;
  auto model2 = Model<double>::build(wider, tiny_vocab());
  CHECK(count_params(model2).learnable > counts.learnable);

  ModelConfig deeper = cfg;
  deeper.stub_depth = 2;
  auto model3 = Model<double>::build(deeper, tiny_vocab());
  CHECK(count_params(model3).learnable == counts.learnable);
  CHECK(count_params(model3).frozen > counts.frozen);
}

TEST_CASE("full model gradient check with the four-term loss at tiny dims") {
  auto model = Model<double>::build(tiny_config(), tiny_vocab());
  Rng rng(23);
  const auto sample = tiny_sample(rng);
  const std::vector<Segment> future = {{0, 4}, {2, 6}};
  const auto targets = build_targets<double>(sample.past_labels, future, 2, 10, model.vocab);

  auto loss_only = [&] {
    const auto pack = model_forward(model, sample);
    return double(total_loss(pack, targets).total);
  };
  auto loss_and_grad = [&] {
    ForwardTrace<double> trace;
    const auto pack = model_forward(model, sample, false, nullptr, &trace);
    const auto loss = total_loss(pack, targets);
    const auto grads = total_loss_backward(pack, targets);
    model_backward(model, sample, trace, pack, grads);
    return double(loss.total);
  };
  auto visit = [&](auto&& fn) { model.visit_params(fn); };
  const auto report = grad_check(loss_and_grad, loss_only, visit);
  CAPTURE(report.worst_param);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("freeze audit: 10 optimizer steps leave frozen params bit-identical") {
  auto model = Model<double>::build(tiny_config(), tiny_vocab());
  const auto frozen_before = snapshot_frozen(model);
  Mat queries_before = model.queries.weights.value;

  AdamOptimizer<double> opt(model, 1e-3);
  Rng rng(29);
  for (int step = 0; step < 10; ++step) {
    const auto sample = tiny_sample(rng);
    const std::vector<Segment> future = {{1, 3}, {0, 7}};
    const auto targets = build_targets<double>(sample.past_labels, future, 2, 10, model.vocab);
    model.zero_grads();
    ForwardTrace<double> trace;
    const auto pack = model_forward(model, sample, true, &rng, &trace);
    const auto grads = total_loss_backward(pack, targets);
    model_backward(model, sample, trace, pack, grads);
    opt.step();
  }

  verify_frozen(model, frozen_before);  // throws on any frozen drift
  CHECK(model.queries.weights.value != queries_before);
}

TEST_CASE("checkpoint: save/load round trip is bit-identical in run mode") {
  namespace fs = std::filesystem;
  ModelConfig cfg = tiny_config();
  auto model = Model<float>::build(cfg, tiny_vocab());

  Rng rng(31);
  SampleInput<float> sample;
  sample.past_labels = {0, 1, 2};
  sample.features = random_normal<float>(3, 6, 1.0f, rng);
  const auto before = model_forward(model, sample);

  const fs::path path = fs::temp_directory_path() / "lta_test_ckpt.bin";
  save_checkpoint(model, path);

  auto loaded = Model<float>::build(cfg, tiny_vocab());
  load_checkpoint(loaded, path);
  const auto after = model_forward(loaded, sample);
  CHECK(before.past_text_logits == after.past_text_logits);
  CHECK(before.past_vision_logits == after.past_vision_logits);
  CHECK(before.future_class_logits == after.future_class_logits);
  CHECK(before.durations == after.durations);

  // config mismatch is refused
  ModelConfig other = cfg;
  other.num_queries = 3;
  auto wrong = Model<float>::build(other, tiny_vocab());
  CHECK_THROWS_AS(load_checkpoint(wrong, path), IntegrityError);

  // header tampering is refused
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  auto fresh = Model<float>::build(cfg, tiny_vocab());
  CHECK_THROWS_AS(load_checkpoint(fresh, path), IntegrityError);
  fs::remove(path);
}

TEST_CASE("shared past head and tuning residual flags") {
  ModelConfig cfg = tiny_config();
  cfg.shared_past_head = true;
  auto model = Model<double>::build(cfg, tiny_vocab());
  Rng rng(37);
  const auto sample = tiny_sample(rng);
  const auto pack = model_forward(model, sample);
  // both past streams decode through the same matrix; hidden rows differ
  CHECK(&model.heads.vision_head() == &model.heads.past_text);

  ModelConfig res = tiny_config();
  res.tuning_residual = true;
  auto model_res = Model<double>::build(res, tiny_vocab());
  const auto base = Model<double>::build(tiny_config(), tiny_vocab());
  const auto with = model_forward(model_res, sample);
  const auto without = model_forward(base, sample);
  CHECK((with.past_text_logits - without.past_text_logits).cwiseAbs().maxCoeff() > 1e-9);
}

TEST_CASE("disable_text zeroes the text stream input") {
  ModelConfig cfg = tiny_config();
  cfg.disable_text = true;
  auto model = Model<double>::build(cfg, tiny_vocab());
  Rng rng(41);
  auto sample = tiny_sample(rng);
  const auto a = model_forward(model, sample);
  auto different_labels = sample;
  for (auto& l : different_labels.past_labels) l = (l + 1) % 3;
  const auto b = model_forward(model, different_labels);
  CHECK(a.past_text_logits == b.past_text_logits);  // labels cannot influence anything
  CHECK(a.future_class_logits == b.future_class_logits);
}
