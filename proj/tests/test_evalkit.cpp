#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "lta/evalkit.hpp"
#include "oracles.hpp"

using namespace lta;
using Mat = MatrixX<double>;
using Vec = VectorX<double>;
namespace fs = std::filesystem;

namespace {

// logits with a decisive argmax per query
Mat logits_for(const std::vector<int>& classes, Index cols) {
  Mat m = Mat::Constant(Index(classes.size()), cols, -5.0);
  for (size_t i = 0; i < classes.size(); ++i) m(Index(i), classes[i]) = 5.0;
  return m;
}

}  // namespace

TEST_CASE("decode_predictions: worked examples") {
  const int none = 2;  // classes: 0=cut, 1=place, 2=stop

  SUBCASE("0.6/0.4 split over horizon 10") {
    const Mat logits = logits_for({0, 1, none, none}, 3);
    Vec dur(4);
    dur << 0.6, 0.4, 0.0, 0.0;
    const auto frames = decode_predictions(logits, dur, 10, none);
    const std::vector<int> expected = {0, 0, 0, 0, 0, 0, 1, 1, 1, 1};
    CHECK(frames == expected);
  }

  SUBCASE("floor-cumsum boundaries 3,6,10") {
    const Mat logits = logits_for({0, 1, 0, none}, 3);
    Vec dur(4);
    dur << 0.33, 0.33, 0.34, 0.0;
    const auto frames = decode_predictions(logits, dur, 10, none);
    const std::vector<int> expected = {0, 0, 0, 1, 1, 1, 0, 0, 0, 0};
    CHECK(frames == expected);
  }

  SUBCASE("stop at the first query falls back to its best other class") {
    Mat logits = logits_for({none, 0}, 3);
    logits(0, 1) = 4.0;  // second-best behind the stop class
    Vec dur = Vec::Ones(2);
    const auto frames = decode_predictions(logits, dur, 6, none);
    CHECK(frames == std::vector<int>(6, 1));
  }

  SUBCASE("all-zero durations spread uniformly") {
    const Mat logits = logits_for({0, 1, none}, 3);
    const Vec dur = Vec::Zero(3);
    const auto frames = decode_predictions(logits, dur, 8, none);
    CHECK(std::count(frames.begin(), frames.end(), 0) == 4);
    CHECK(std::count(frames.begin(), frames.end(), 1) == 4);
  }
}

TEST_CASE("decode_predictions: expanded length is exact, oracle agreement") {
  Rng rng(3);
  // exhaustive small horizons plus random durations
  for (Index horizon = 1; horizon <= 12; ++horizon) {
    for (int it = 0; it < 120; ++it) {
      const Index n = std::uniform_int_distribution<Index>(1, 5)(rng);
      const int k = 4;
      Mat logits = random_normal<double>(n, k + 1, 2.0, rng);
      Vec dur(n);
      for (Index i = 0; i < n; ++i)
        dur(i) = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      const auto frames = decode_predictions(logits, dur, horizon, k);
      CHECK(Index(frames.size()) == horizon);
      for (int f : frames) {
        CHECK(f >= 0);
        CHECK(f < k);  // the stop class never appears in expanded frames
      }

      // straight-line per-frame oracle over the same kept queries
      std::vector<int> classes;
      for (Index i = 0; i < n; ++i) {
        Index best;
        logits.row(i).maxCoeff(&best);
        if (int(best) == k) break;
        classes.push_back(int(best));
      }
      if (!classes.empty()) {
        double total = 0;
        for (size_t i = 0; i < classes.size(); ++i) total += std::max(0.0, dur(Index(i)));
        std::vector<double> weights(classes.size());
        for (size_t i = 0; i < classes.size(); ++i)
          weights[i] = total < 1e-12 ? 1.0 / double(classes.size())
                                     : std::max(0.0, dur(Index(i))) / total;
        CHECK(frames == oracle::decode(classes, weights, horizon));
      }
    }
  }
}

TEST_CASE("decode of exact target fractions reproduces the ground truth") {
  // segment boundaries landing on integers round-trip exactly
  const int none = 3;
  const Mat logits = logits_for({2, 0, 1, none}, 4);
  Vec dur(4);
  dur << 0.25, 0.5, 0.25, 0.0;
  const std::vector<int> gt = {2, 2, 0, 0, 0, 0, 1, 1};
  CHECK(decode_predictions(logits, dur, 8, none) == gt);
}

TEST_CASE("moc: worked example, perfect prediction, oracle and relabeling") {
  CHECK(moc({0, 1, 1, 1}, {0, 0, 1, 1}) == doctest::Approx(0.75));
  CHECK(moc({2, 2, 0}, {2, 2, 0}) == doctest::Approx(1.0));
  CHECK_THROWS_AS(moc({0, 1}, {0, 1, 2}), DimensionError);

  Rng rng(7);
  for (int it = 0; it < 300; ++it) {
    const size_t n = size_t(std::uniform_int_distribution<int>(1, 60)(rng));
    std::vector<int> pred(n), gt(n);
    for (size_t i = 0; i < n; ++i) {
      pred[i] = std::uniform_int_distribution<int>(0, 5)(rng);
      gt[i] = std::uniform_int_distribution<int>(0, 5)(rng);
    }
    const double got = moc(pred, gt);
    CHECK(got == doctest::Approx(oracle::moc(pred, gt)).epsilon(1e-12));
    CHECK(got >= 0.0);
    CHECK(got <= 1.0);

    // joint relabeling leaves the value unchanged
    std::vector<int> relabel = {3, 5, 0, 2, 4, 1};
    std::vector<int> pred_r(n), gt_r(n);
    for (size_t i = 0; i < n; ++i) {
      pred_r[i] = relabel[size_t(pred[i])];
      gt_r[i] = relabel[size_t(gt[i])];
    }
    CHECK(moc(pred_r, gt_r) == doctest::Approx(got).epsilon(1e-12));
  }
}

TEST_CASE("moc: classes absent from the prediction still count as zero") {
  // gt has classes {0,1}; prediction never says 1
  CHECK(moc({0, 0, 0, 0}, {0, 0, 1, 1}) == doctest::Approx(0.5));
}

TEST_CASE("evaluate_grid: shape, protocol equivalence, determinism") {
  ModelConfig cfg;
  cfg.num_classes = 4;
  cfg.feature_dim = 6;
  cfg.embed_dim = 16;
  cfg.cmib_dim = 8;
  cfg.tune_mid = 2;
  cfg.num_queries = 3;
  cfg.cmib_heads = 2;
  cfg.stub_heads = 2;
  cfg.stub_depth = 1;
  cfg.token_buckets = 32;
  cfg.seed = 5;
  const auto vocab = Vocabulary::from_names({"a", "b", "c", "d"}, 32);
  auto model = Model<double>::build(cfg, vocab);

  Rng rng(11);
  std::vector<VideoRecord<double>> records;
  for (int v = 0; v < 3; ++v) {
    VideoRecord<double> rec;
    rec.id = "v" + std::to_string(v);
    const Index frames = 120 + 20 * v;
    for (Index f = 0; f < frames; ++f)
      rec.gt_labels.push_back(int((f / 17) % 4));
    rec.features = random_normal<double>(frames, 6, 1.0, rng);
    records.push_back(std::move(rec));
  }

  const std::vector<double> alphas = {0.2, 0.3};
  const std::vector<double> betas = {0.1, 0.2, 0.3, 0.5};
  const auto report = evaluate_grid(model, records, alphas, betas, 4);
  CHECK(report.cells.size() == 2);
  CHECK(report.cells[0].size() == 4);
  for (const auto& row : report.cells)
    for (double cell : row) {
      CHECK(cell >= 0.0);
      CHECK(cell <= 1.0);
    }

  // protocol: decode once at beta=0.5 and truncate per beta
  for (size_t ai = 0; ai < alphas.size(); ++ai) {
    std::vector<double> sums(betas.size(), 0.0);
    for (const auto& rec : records) {
      const auto obs = sample_observation(rec, {alphas[ai], 0.5, 4, 0});
      SampleInput<double> input{obs.gt_labels, obs.features};
      const auto pack = model_forward(model, input);
      const auto decoded = decode_predictions(pack.future_class_logits, pack.durations,
                                              obs.horizon_frames, vocab.none_id());
      const Index obs_end = ratio_floor(alphas[ai], rec.frames());
      for (size_t bi = 0; bi < betas.size(); ++bi) {
        const Index h = ratio_floor(alphas[ai] + betas[bi], rec.frames()) - obs_end;
        const std::vector<int> pred(decoded.begin(), decoded.begin() + h);
        const std::vector<int> gt(rec.gt_labels.begin() + obs_end,
                                  rec.gt_labels.begin() + obs_end + h);
        sums[bi] += moc(pred, gt);
      }
    }
    for (size_t bi = 0; bi < betas.size(); ++bi)
      CHECK(report.cells[ai][bi] == doctest::Approx(sums[bi] / 3.0).epsilon(1e-12));
  }

  const auto report2 = evaluate_grid(model, records, alphas, betas, 4);
  CHECK(report.cells == report2.cells);
  CHECK(report.average == report2.average);

  // grid average is the arithmetic mean of the cells
  double mean = 0;
  for (const auto& row : report.cells)
    for (double cell : row) mean += cell;
  CHECK(report.average == doctest::Approx(mean / 8.0).epsilon(1e-12));

  // short videos are skipped and counted
  VideoRecord<double> tiny;
  tiny.id = "tiny";
  tiny.gt_labels = {0, 1, 2};
  tiny.features = random_normal<double>(3, 6, 1.0, rng);
  auto with_tiny = records;
  with_tiny.push_back(tiny);
  const auto report3 = evaluate_grid(model, with_tiny, alphas, betas, 4);
  CHECK(report3.skipped == 1);

  const std::string kv = report.to_kv();
  CHECK(kv.find("aggregation=") != std::string::npos);
  CHECK(kv.find("config_hash=") != std::string::npos);
}

TEST_CASE("emit_timeline: text lines, svg rect count, idempotence") {
  const auto vocab = Vocabulary::from_names({"cut", "mix"}, 16);
  const std::vector<int> gt = {0, 0, 1, 1};
  const std::vector<int> pred = {0, 1, 1, 1};
  const fs::path base = fs::temp_directory_path() / "lta_timeline_test";

  emit_timeline(pred, gt, vocab, base);

  std::ifstream txt(base.string() + ".txt");
  std::string line1, line2, extra;
  REQUIRE(std::getline(txt, line1));
  REQUIRE(std::getline(txt, line2));
  CHECK_FALSE(std::getline(txt, extra));
  CHECK(line1 == "gt: (cut,0,2) (mix,2,4)");
  CHECK(line2 == "pred: (cut,0,1) (mix,1,4)");

  std::ifstream svg_in(base.string() + ".svg");
  std::string svg((std::istreambuf_iterator<char>(svg_in)), std::istreambuf_iterator<char>());
  size_t rects = 0, at = 0;
  while ((at = svg.find("<rect", at)) != std::string::npos) {
    ++rects;
    at += 5;
  }
  CHECK(rects == 4);  // 2 runs per track

  emit_timeline(pred, gt, vocab, base);
  std::ifstream svg_again(base.string() + ".svg");
  std::string svg2((std::istreambuf_iterator<char>(svg_again)), std::istreambuf_iterator<char>());
  CHECK(svg == svg2);

  fs::remove(base.string() + ".txt");
  fs::remove(base.string() + ".svg");
}
