#pragma once

// Evaluation: expand query predictions into frame-level sequences, mean-over-
// classes accuracy, the alpha x beta grid report, and timeline renderings.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "lta/backbone.hpp"
#include "lta/datapipe.hpp"
#include "lta/types.hpp"

namespace lta {

// Queries up to (excluding) the first predicted stop class become segments;
// their durations are renormalized and mapped to frames with floor-of-cumsum
// boundaries, the final boundary forced to the horizon. A stop prediction at
// the first query falls back to its best non-stop class for the whole horizon.
template <typename Scalar>
std::vector<int> decode_predictions(const MatrixX<Scalar>& class_logits,
                                    const VectorX<Scalar>& durations, Index horizon, int none_id) {
  if (horizon < 1) throw InputError("decode_predictions: empty horizon");
  const Index n = class_logits.rows();
  if (durations.size() != n) throw DimensionError("decode_predictions: logits/durations mismatch");

  std::vector<int> classes;
  for (Index i = 0; i < n; ++i) {
    Index best;
    class_logits.row(i).maxCoeff(&best);
    if (int(best) == none_id) break;
    classes.push_back(int(best));
  }

  std::vector<int> frames(static_cast<size_t>(horizon));
  if (classes.empty()) {
    Index best = 0;
    Scalar best_val = std::numeric_limits<Scalar>::lowest();
    for (Index j = 0; j < class_logits.cols(); ++j) {
      if (int(j) == none_id) continue;
      if (class_logits(0, j) > best_val) {
        best_val = class_logits(0, j);
        best = j;
      }
    }
    std::fill(frames.begin(), frames.end(), int(best));
    return frames;
  }

  const Index m = Index(classes.size());
  double total = 0;
  for (Index i = 0; i < m; ++i) total += std::max(0.0, double(durations(i)));
  std::vector<double> weights(static_cast<size_t>(m));
  for (Index i = 0; i < m; ++i)
    weights[size_t(i)] = total < 1e-12 ? 1.0 / double(m) : std::max(0.0, double(durations(i))) / total;

  double cum = 0;
  Index prev = 0;
  for (Index i = 0; i < m; ++i) {
    cum += weights[size_t(i)];
    Index bound = i + 1 == m ? horizon : Index(std::floor(cum * double(horizon)));
    bound = std::clamp<Index>(bound, prev, horizon);
    for (Index f = prev; f < bound; ++f) frames[size_t(f)] = classes[size_t(i)];
    prev = bound;
  }
  return frames;
}

// Per-class frame accuracy averaged over the classes present in the ground
// truth; classes with zero correct frames still enter the mean.
inline double moc(const std::vector<int>& pred, const std::vector<int>& gt) {
  if (pred.size() != gt.size()) throw DimensionError("moc: length mismatch");
  if (gt.empty()) throw InputError("moc: empty sequences");
  const int max_class = *std::max_element(gt.begin(), gt.end());
  std::vector<Index> total(size_t(max_class) + 1, 0), correct(size_t(max_class) + 1, 0);
  for (size_t i = 0; i < gt.size(); ++i) {
    ++total[size_t(gt[i])];
    if (pred[i] == gt[i]) ++correct[size_t(gt[i])];
  }
  double sum = 0;
  int classes = 0;
  for (size_t c = 0; c < total.size(); ++c) {
    if (total[c] == 0) continue;
    sum += double(correct[c]) / double(total[c]);
    ++classes;
  }
  return sum / double(classes);
}

// ---------------------------------------------------------------------------
// grid evaluation

struct EvalReport {
  std::vector<double> alphas;
  std::vector<double> betas;
  std::vector<std::vector<double>> cells;  // [alpha][beta], mean over videos
  double average = 0;
  int videos = 0;
  int skipped = 0;  // videos with an empty observation at some alpha
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::string split;
  std::string label = "ours";
  // MoC is computed over classes within each video, then averaged over videos
  static constexpr const char* kAggregation = "classes-within-video,mean-over-videos";

  std::string to_table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << std::setw(10) << std::left << "method";
    for (double a : alphas) {
      for (double b : betas) {
        std::ostringstream h;
        h << "a" << std::setprecision(2) << a << "/b" << b;
        os << std::setw(10) << std::right << h.str();
      }
    }
    os << std::setw(10) << std::right << "average" << "\n";
    os << std::setw(10) << std::left << label;
    os << std::setprecision(4);
    for (const auto& row : cells)
      for (double v : row) os << std::setw(10) << std::right << v;
    os << std::setw(10) << std::right << average << "\n";
    return os.str();
  }

  std::string to_kv() const {
    std::ostringstream os;
    os << "config_hash=" << std::hex << config_hash << std::dec << "\n";
    os << "seed=" << seed << "\n";
    os << "split=" << split << "\n";
    os << "videos=" << videos << "\n";
    os << "skipped=" << skipped << "\n";
    os << "aggregation=" << kAggregation << "\n";
    os << std::setprecision(10);
    for (size_t ai = 0; ai < alphas.size(); ++ai)
      for (size_t bi = 0; bi < betas.size(); ++bi)
        os << "moc[" << alphas[ai] << "][" << betas[bi] << "]=" << cells[ai][bi] << "\n";
    os << "average=" << average << "\n";
    return os.str();
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write report " + path.string());
    out << to_table() << "\n" << to_kv();
  }
};

// Inference protocol: start frame 0, one forward per (video, alpha), decoded
// once at the training prediction ratio and truncated to each beta.
template <typename Scalar>
EvalReport evaluate_grid(const Model<Scalar>& model,
                         const std::vector<VideoRecord<Scalar>>& records,
                         const std::vector<double>& alphas, const std::vector<double>& betas,
                         int rate, double decode_beta = 0.5) {
  if (alphas.empty() || betas.empty()) throw InputError("evaluate_grid: empty alpha/beta list");
  for (double b : betas) decode_beta = std::max(decode_beta, b);

  EvalReport report;
  report.alphas = alphas;
  report.betas = betas;
  report.cells.assign(alphas.size(), std::vector<double>(betas.size(), 0.0));
  report.videos = int(records.size());
  report.config_hash = model.cfg.hash();
  report.seed = model.cfg.seed;

  std::vector<std::vector<int>> counts(alphas.size(), std::vector<int>(betas.size(), 0));
  std::vector<bool> video_skipped(records.size(), false);

  for (size_t vi = 0; vi < records.size(); ++vi) {
    const auto& rec = records[vi];
    for (size_t ai = 0; ai < alphas.size(); ++ai) {
      ObservationSpec spec{alphas[ai], decode_beta, rate, 0};
      const Index frames = rec.frames();
      if (ratio_floor(spec.alpha, frames) / spec.rate < 1) {
        video_skipped[vi] = true;
        continue;
      }
      const Observation<Scalar> obs = sample_observation(rec, spec);
      SampleInput<Scalar> input;
      input.past_labels = obs.predicted_labels ? *obs.predicted_labels : obs.gt_labels;
      input.features = obs.features;
      const PredictionPack<Scalar> pack = model_forward(model, input);
      const std::vector<int> decoded =
          decode_predictions(pack.future_class_logits, pack.durations, obs.horizon_frames,
                             model.vocab.none_id());
      const Index obs_end = ratio_floor(spec.alpha, frames);
      for (size_t bi = 0; bi < betas.size(); ++bi) {
        const Index h = ratio_floor(alphas[ai] + betas[bi], frames) - obs_end;
        if (h < 1 || h > Index(decoded.size())) continue;
        const std::vector<int> pred(decoded.begin(), decoded.begin() + h);
        const std::vector<int> gt(rec.gt_labels.begin() + obs_end,
                                  rec.gt_labels.begin() + obs_end + h);
        report.cells[ai][bi] += moc(pred, gt);
        ++counts[ai][bi];
      }
    }
  }

  double total = 0;
  for (size_t ai = 0; ai < alphas.size(); ++ai)
    for (size_t bi = 0; bi < betas.size(); ++bi) {
      if (counts[ai][bi] > 0) report.cells[ai][bi] /= counts[ai][bi];
      total += report.cells[ai][bi];
    }
  report.average = total / double(alphas.size() * betas.size());
  report.skipped = int(std::count(video_skipped.begin(), video_skipped.end(), true));
  return report;
}

// ---------------------------------------------------------------------------
// timeline rendering

namespace timeline_detail {
inline std::string class_color(int class_id) {
  // golden-angle hue walk, saturated; deterministic per class id
  const double h = std::fmod(double(class_id) * 137.508, 360.0) / 60.0;
  const double s = 0.65, v = 0.85;
  const double c = v * s;
  const double x = c * (1.0 - std::fabs(std::fmod(h, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (int(h)) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = v - c;
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", int((r + m) * 255), int((g + m) * 255),
                int((b + m) * 255));
  return buf;
}
}  // namespace timeline_detail

// Writes <base>.txt (one "(class,start,end)" segment list per track) and
// <base>.svg (one colored bar per segment, ground truth above prediction).
inline void emit_timeline(const std::vector<int>& pred, const std::vector<int>& gt,
                          const Vocabulary& vocab, const std::filesystem::path& base) {
  if (pred.size() != gt.size()) throw DimensionError("emit_timeline: length mismatch");
  const Index n = Index(gt.size());
  const auto gt_segments = run_length_encode(gt, 0, n);
  const auto pred_segments = run_length_encode(pred, 0, n);

  auto track_line = [&](const char* name, const std::vector<Segment>& segs) {
    std::ostringstream os;
    os << name << ":";
    Index pos = 0;
    for (const auto& s : segs) {
      os << " (" << vocab.name_of(s.class_id) << "," << pos << "," << pos + s.length << ")";
      pos += s.length;
    }
    return os.str();
  };

  {
    std::ofstream txt(base.string() + ".txt");
    if (!txt) throw ParseError("cannot write timeline " + base.string() + ".txt");
    txt << track_line("gt", gt_segments) << "\n" << track_line("pred", pred_segments) << "\n";
  }

  const double width = 800.0, bar = 40.0, gap = 20.0;
  std::ofstream svg(base.string() + ".svg");
  if (!svg) throw ParseError("cannot write timeline " + base.string() + ".svg");
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << int(width) << "\" height=\""
      << int(2 * bar + 3 * gap) << "\">\n";
  auto draw = [&](const std::vector<Segment>& segs, double y) {
    Index pos = 0;
    for (const auto& s : segs) {
      const double x0 = double(pos) / double(n) * width;
      const double w = double(s.length) / double(n) * width;
      svg << "  <rect x=\"" << x0 << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << bar
          << "\" fill=\"" << timeline_detail::class_color(s.class_id) << "\"/>\n";
      pos += s.length;
    }
  };
  draw(gt_segments, gap);
  draw(pred_segments, bar + 2 * gap);
  svg << "</svg>\n";
}

}  // namespace lta
