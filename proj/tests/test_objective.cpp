#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lta/gradcheck.hpp"
#include "lta/objective.hpp"
#include "oracles.hpp"

using namespace lta;
using Mat = MatrixX<double>;
using Vec = VectorX<double>;

namespace {
Vocabulary vocab4() { return Vocabulary::from_names({"cut", "place", "pour", "mix"}, 32); }

Mat onehot(const std::vector<int>& ids, Index cols) {
  Mat m = Mat::Zero(Index(ids.size()), cols);
  for (size_t i = 0; i < ids.size(); ++i) m(Index(i), ids[i]) = 1.0;
  return m;
}
}  // namespace

TEST_CASE("build_targets: segment fit, stop position, padding") {
  const Vocabulary v = vocab4();

  SUBCASE("two segments, room for the stop class") {
    // horizon 10, segments (cut,6)(place,4), N=4
    const auto t = build_targets<double>({0, 1}, {{0, 6}, {1, 4}}, 4, 10, v);
    CHECK(t.none_pos == 3);
    CHECK(t.future_onehot(0, 0) == 1.0);
    CHECK(t.future_onehot(1, 1) == 1.0);
    CHECK(t.future_onehot(2, v.none_id()) == 1.0);
    CHECK(t.future_onehot(3, v.none_id()) == 1.0);  // padding row
    CHECK(t.durations(0) == doctest::Approx(0.6));
    CHECK(t.durations(1) == doctest::Approx(0.4));
    CHECK(t.durations(2) == 0.0);
    CHECK(t.past_onehot.rows() == 2);
    CHECK(t.past_onehot(0, 0) == 1.0);
    CHECK(t.past_onehot(1, 1) == 1.0);
  }

  SUBCASE("single segment filling the horizon") {
    const auto t = build_targets<double>({0}, {{2, 8}}, 2, 8, v);
    CHECK(t.none_pos == 2);
    CHECK(t.future_onehot(0, 2) == 1.0);
    CHECK(t.future_onehot(1, v.none_id()) == 1.0);
    CHECK(t.durations(0) == doctest::Approx(1.0));
  }

  SUBCASE("more segments than queries: truncate and renormalize") {
    const std::vector<Segment> five = {{0, 2}, {1, 2}, {2, 2}, {3, 2}, {0, 2}};
    const auto t = build_targets<double>({0}, five, 3, 10, v);
    CHECK(t.none_pos == 4);  // N+1, no stop row fits
    CHECK(t.future_onehot(0, 0) == 1.0);
    CHECK(t.future_onehot(1, 1) == 1.0);
    CHECK(t.future_onehot(2, 2) == 1.0);
    // fractions recomputed over the kept 6 frames
    CHECK(t.durations(0) == doctest::Approx(2.0 / 6.0));
    CHECK(t.durations(1) == doctest::Approx(2.0 / 6.0));
    CHECK(t.durations(2) == doctest::Approx(2.0 / 6.0));
    CHECK(t.durations.sum() == doctest::Approx(1.0).epsilon(1e-9));
  }

  SUBCASE("segments not covering the horizon are rejected") {
    CHECK_THROWS_AS(build_targets<double>({0}, {{0, 5}}, 2, 10, v), InputError);
  }

  SUBCASE("duration fractions sum to one whenever any segment is kept") {
    Rng rng(3);
    for (int it = 0; it < 200; ++it) {
      std::vector<Segment> segs;
      Index horizon = 0;
      const int count = std::uniform_int_distribution<int>(1, 7)(rng);
      for (int s = 0; s < count; ++s) {
        const Index len = std::uniform_int_distribution<Index>(1, 9)(rng);
        segs.push_back({std::uniform_int_distribution<int>(0, 3)(rng), len});
        horizon += len;
      }
      const auto t = build_targets<double>({0}, segs, 4, horizon, v);
      double sum = 0;
      for (Index i = 0; i < Index(t.none_pos) - 1 && i < 4; ++i) sum += t.durations(i);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("seg_loss: perfect prediction, uniform analytic value, oracle") {
  // near-perfect one-hot probabilities drive the loss to zero
  Mat confident(2, 3);
  confident << 100, 0, 0, 0, 100, 0;
  CHECK(seg_loss(confident, onehot({0, 1}, 3)) == doctest::Approx(0.0).epsilon(1e-12));

  // uniform logits: theta0 * ln K
  const Mat uniform = Mat::Zero(2, 3);
  CHECK(seg_loss(uniform, onehot({0, 2}, 3)) == doctest::Approx(2.0 * std::log(3.0)));

  Rng rng(5);
  for (int it = 0; it < 200; ++it) {
    const Mat logits = random_normal<double>(3, 4, 2.0, rng);
    const Mat t = onehot({std::uniform_int_distribution<int>(0, 3)(rng),
                          std::uniform_int_distribution<int>(0, 3)(rng),
                          std::uniform_int_distribution<int>(0, 3)(rng)},
                         4);
    CHECK(seg_loss(logits, t) ==
          doctest::Approx(oracle::cross_entropy(logits, t, 3)).epsilon(1e-12));
  }

  const Mat bad = Mat::Zero(2, 4);
  CHECK_THROWS_AS(seg_loss(bad, onehot({0, 1}, 3)), DimensionError);
}

TEST_CASE("class_loss: counted positions, masking exactness, analytic value") {
  const Index n = 3, k1 = 5;
  Rng rng(7);

  // phi = N+1 counts every position
  const Mat logits = random_normal<double>(n, k1, 1.5, rng);
  const Mat targets = onehot({0, 2, 4}, k1);
  CHECK(class_loss(logits, targets, int(n) + 1) ==
        doctest::Approx(oracle::cross_entropy(logits, targets, n)).epsilon(1e-12));

  // positions beyond phi are never read: bitwise identical loss
  const double base = class_loss(logits, targets, 2);
  Mat tampered = logits;
  tampered.row(2).setConstant(1e6);
  CHECK(class_loss(tampered, targets, 2) == base);

  // N=3, phi=2, uniform logits over 5 classes -> 2*ln5
  const Mat uniform = Mat::Zero(3, 5);
  CHECK(class_loss(uniform, targets, 2) == doctest::Approx(2.0 * std::log(5.0)));
}

TEST_CASE("dur_loss: analytic case, zero at optimum, strict masking") {
  Vec target(2), pred(2);
  target << 0.6, 0.4;
  pred << 0.5, 0.5;
  CHECK(dur_loss(pred, target, 3) == doctest::Approx(0.02));
  CHECK(dur_loss(target, target, 3) == 0.0);

  // position phi itself is excluded
  Vec pred3(3), target3(3);
  target3 << 0.5, 0.5, 0.0;
  pred3 << 0.4, 0.6, 0.0;
  const double base = dur_loss(pred3, target3, 3);
  Vec tampered = pred3;
  tampered(2) = 123.0;
  CHECK(dur_loss(tampered, target3, 3) == base);

  Vec shorter(1);
  CHECK_THROWS_AS(dur_loss(shorter, target, 2), DimensionError);
}

TEST_CASE("total_loss: exact breakdown sum and component isolation") {
  Rng rng(11);
  const Vocabulary v = vocab4();
  PredictionPack<double> pack;
  pack.past_text_logits = random_normal<double>(2, 4, 1.0, rng);
  pack.past_vision_logits = random_normal<double>(2, 4, 1.0, rng);
  pack.future_class_logits = random_normal<double>(3, 5, 1.0, rng);
  pack.duration_raw = VectorX<double>::Zero(3);
  pack.durations = random_normal<double>(3, 1, 0.3, rng).col(0).cwiseAbs();

  const auto targets = build_targets<double>({0, 1}, {{2, 5}, {3, 5}}, 3, 10, v);
  const auto breakdown = total_loss(pack, targets);
  CHECK(breakdown.total ==
        breakdown.text + breakdown.vision + breakdown.future_class + breakdown.duration);
  CHECK(breakdown.text >= 0.0);
  CHECK(breakdown.vision >= 0.0);
  CHECK(breakdown.future_class >= 0.0);
  CHECK(breakdown.duration >= 0.0);

  // matches a single-expression combination of the oracles
  const double expected =
      oracle::cross_entropy(pack.past_text_logits, targets.past_onehot, 2) +
      oracle::cross_entropy(pack.past_vision_logits, targets.past_onehot, 2) +
      oracle::cross_entropy(pack.future_class_logits, targets.future_onehot,
                            std::min<Index>(targets.none_pos, 3)) +
      oracle::squared_duration_error({pack.durations(0), pack.durations(1), pack.durations(2)},
                                     {targets.durations(0), targets.durations(1),
                                      targets.durations(2)},
                                     targets.none_pos);
  CHECK(breakdown.total == doctest::Approx(expected).epsilon(1e-12));

  // three components zero, one equals x
  PredictionPack<double> perfect = pack;
  perfect.past_text_logits = 1000.0 * targets.past_onehot;
  perfect.past_vision_logits = 1000.0 * targets.past_onehot;
  perfect.future_class_logits = 1000.0 * targets.future_onehot;
  perfect.durations = targets.durations;
  perfect.durations(0) += 0.1;  // only the duration term contributes
  const auto iso = total_loss(perfect, targets);
  CHECK(iso.text == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(iso.vision == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(iso.future_class == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(iso.total == doctest::Approx(0.01));

  const auto no_text = total_loss(pack, targets, /*disable_text=*/true);
  CHECK(no_text.text == 0.0);
  CHECK(no_text.total == doctest::Approx(breakdown.total - breakdown.text));
}

TEST_CASE("loss masking: randomized positions beyond the stop never matter") {
  Rng rng(13);
  for (int it = 0; it < 200; ++it) {
    const Index n = 4, k1 = 4;
    const Mat logits = random_normal<double>(n, k1, 1.0, rng);
    Mat targets = Mat::Zero(n, k1);
    for (Index i = 0; i < n; ++i) targets(i, std::uniform_int_distribution<int>(0, 3)(rng)) = 1.0;
    const int phi = std::uniform_int_distribution<int>(1, int(n) + 1)(rng);
    const double class_base = class_loss(logits, targets, phi);

    Mat tampered = logits;
    for (Index i = Index(phi); i < n; ++i)
      tampered.row(i) = random_normal<double>(1, k1, 100.0, rng);
    CHECK(class_loss(tampered, targets, phi) == class_base);

    Vec dur = random_normal<double>(n, 1, 1.0, rng).col(0);
    Vec dur_t = random_normal<double>(n, 1, 1.0, rng).col(0);
    const double dur_base = dur_loss(dur, dur_t, phi);
    Vec dur_tampered = dur;
    for (Index i = Index(phi) - 1; i < n; ++i)
      dur_tampered(i) = std::uniform_real_distribution<double>(-50, 50)(rng);
    CHECK(dur_loss(dur_tampered, dur_t, phi) == dur_base);
  }
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(17);
  const Vocabulary v = vocab4();
  const auto targets = build_targets<double>({0, 1}, {{1, 3}, {0, 7}}, 3, 10, v);

  Param<double> t_logits(2, 4), v_logits(2, 4), a_logits(3, 5), dur(3, 1);
  t_logits.value = random_normal<double>(2, 4, 1.0, rng);
  v_logits.value = random_normal<double>(2, 4, 1.0, rng);
  a_logits.value = random_normal<double>(3, 5, 1.0, rng);
  dur.value = random_normal<double>(3, 1, 1.0, rng);

  auto make_pack = [&] {
    PredictionPack<double> pack;
    pack.past_text_logits = t_logits.value;
    pack.past_vision_logits = v_logits.value;
    pack.future_class_logits = a_logits.value;
    pack.duration_raw = dur.value.col(0);
    pack.durations = dur.value.col(0);  // identity link keeps the check simple
    return pack;
  };
  auto loss_only = [&] { return double(total_loss(make_pack(), targets).total); };
  auto loss_and_grad = [&] {
    const auto pack = make_pack();
    const auto loss = total_loss(pack, targets);
    const auto g = total_loss_backward(pack, targets);
    t_logits.accumulate(g.past_text_logits);
    v_logits.accumulate(g.past_vision_logits);
    a_logits.accumulate(g.future_class_logits);
    dur.accumulate(g.durations);
    return double(loss.total);
  };
  auto visit = [&](auto&& fn) {
    fn("t", t_logits);
    fn("v", v_logits);
    fn("a", a_logits);
    fn("d", dur);
  };
  CHECK(grad_check(loss_and_grad, loss_only, visit).max_rel_err < 1e-6);
}
