#pragma once

// Dataset ingestion and sampling: the mapping/groundTruth/features/bundles
// on-disk layout, strided observation sampling with the floor(alpha*T/rate)
// count, controlled label noise, and the deterministic synthetic grammar used
// for closed-loop tests.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lta/adapters.hpp"
#include "lta/types.hpp"

namespace lta {

template <typename Scalar>
struct VideoRecord {
  std::string id;
  std::vector<int> gt_labels;  // one class id per frame
  MatrixX<Scalar> features;    // frames x feature_dim
  std::optional<std::vector<int>> predicted_labels;

  Index frames() const { return Index(gt_labels.size()); }
};

struct ObservationSpec {
  double alpha = 0.2;  // observed fraction
  double beta = 0.5;   // predicted fraction
  int rate = 8;        // frames between samples
  int start = 0;       // first sampled frame, in [0, rate)

  void validate() const {
    if (alpha <= 0 || beta < 0 || alpha + beta > 1.0 + 1e-12)
      throw InputError("observation: need alpha > 0, beta >= 0, alpha+beta <= 1");
    if (rate < 1) throw InputError("observation: sampling rate must be >= 1");
    if (start < 0 || start >= rate) throw InputError("observation: start must be in [0, rate)");
  }
};

// floor(ratio * frames), nudged so exact mathematical integers survive
// binary-fraction rounding
inline Index ratio_floor(double ratio, Index frames) {
  return Index(std::floor(ratio * double(frames) + 1e-9));
}

inline std::vector<Segment> run_length_encode(const std::vector<int>& labels, Index begin,
                                              Index end) {
  std::vector<Segment> segments;
  for (Index i = begin; i < end; ++i) {
    if (!segments.empty() && segments.back().class_id == labels[size_t(i)])
      ++segments.back().length;
    else
      segments.push_back({labels[size_t(i)], 1});
  }
  return segments;
}

inline std::vector<int> expand_segments(const std::vector<Segment>& segments) {
  std::vector<int> out;
  for (const auto& s : segments) out.insert(out.end(), size_t(s.length), s.class_id);
  return out;
}

template <typename Scalar>
struct Observation {
  MatrixX<Scalar> features;  // theta0 x feature_dim
  std::vector<int> gt_labels;
  std::optional<std::vector<int>> predicted_labels;
  Index theta0 = 0;
  std::vector<Segment> horizon;  // run-length encoded future
  Index horizon_frames = 0;
};

// Samples frames start, start+rate, ... strictly inside the observed prefix;
// the horizon covers frames [floor(alpha*T), floor((alpha+beta)*T)).
template <typename Scalar>
Observation<Scalar> sample_observation(const VideoRecord<Scalar>& v, const ObservationSpec& spec) {
  spec.validate();
  const Index frames = v.frames();
  const Index theta0 = ratio_floor(spec.alpha, frames) / spec.rate;
  if (theta0 < 1)
    throw InputError("sample_observation: observation of video '" + v.id + "' is empty");

  Observation<Scalar> obs;
  obs.theta0 = theta0;
  obs.features.resize(theta0, v.features.cols());
  obs.gt_labels.resize(size_t(theta0));
  if (v.predicted_labels) obs.predicted_labels.emplace(size_t(theta0));
  for (Index k = 0; k < theta0; ++k) {
    const Index f = Index(spec.start) + k * spec.rate;
    obs.features.row(k) = v.features.row(f);
    obs.gt_labels[size_t(k)] = v.gt_labels[size_t(f)];
    if (v.predicted_labels) (*obs.predicted_labels)[size_t(k)] = (*v.predicted_labels)[size_t(f)];
  }
  const Index obs_end = ratio_floor(spec.alpha, frames);
  const Index pred_end = ratio_floor(spec.alpha + spec.beta, frames);
  obs.horizon = run_length_encode(v.gt_labels, obs_end, pred_end);
  obs.horizon_frames = pred_end - obs_end;
  return obs;
}

// Each position is independently replaced, with probability p, by a uniformly
// random different class.
inline std::vector<int> inject_label_noise(std::vector<int> labels, double p, int num_classes,
                                           Rng& rng) {
  if (p < 0 || p > 1) throw InputError("inject_label_noise: p must be in [0,1]");
  if (num_classes < 2 || p == 0) return labels;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<int> offset(1, num_classes - 1);
  for (auto& l : labels)
    if (coin(rng) < p) l = (l + offset(rng)) % num_classes;
  return labels;
}

// ---------------------------------------------------------------------------
// synthetic corpus

// Single-cycle class transition table with a fixed duration per class: any
// observation pins down the entire future. Durations and per-video phase
// offsets are multiples of `quantize`; generating with quantize equal to the
// sampling rate puts every segment boundary on the sampling grid, so a strided
// observation resolves the phase exactly.
struct SynthGrammar {
  int num_classes = 0;
  std::vector<int> next;        // permutation, one cycle
  std::vector<Index> duration;  // frames per class
  int feature_dim = 16;
  double feature_noise = 1.0;
  double phase_scale = 1.0;
  Index quantize = 1;
  std::uint64_t seed = 0;

  static SynthGrammar make(int num_classes, int feature_dim, Index dur_min, Index dur_max,
                           double feature_noise, std::uint64_t seed, Index quantize = 1,
                           double phase_scale = 1.0) {
    if (num_classes < 2) throw InputError("synth grammar: need at least 2 classes");
    if (dur_min < 1 || dur_max < dur_min) throw InputError("synth grammar: bad duration range");
    if (quantize < 1 || dur_min < quantize)
      throw InputError("synth grammar: quantize must be in [1, dur_min]");
    SynthGrammar g;
    g.num_classes = num_classes;
    g.feature_dim = feature_dim;
    g.feature_noise = feature_noise;
    g.phase_scale = phase_scale;
    g.quantize = quantize;
    g.seed = seed;
    Rng rng(derive_seed(seed, fnv1a64("synth_grammar")));
    std::vector<int> order(static_cast<size_t>(num_classes));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    g.next.resize(size_t(num_classes));
    for (int i = 0; i < num_classes; ++i)
      g.next[size_t(order[size_t(i)])] = order[size_t((i + 1) % num_classes)];
    // durations sweep the range evenly; which class gets which length is the
    // seed-dependent part
    const Index levels = (dur_max - dur_min) / quantize + 1;
    g.duration.resize(size_t(num_classes));
    for (int i = 0; i < num_classes; ++i)
      g.duration[size_t(order[size_t(i)])] = dur_min + quantize * (Index(i) % levels);
    return g;
  }

  // class-conditioned feature directions; pairwise distinct by construction
  template <typename Scalar>
  MatrixX<Scalar> class_means() const {
    Rng rng(derive_seed(seed, fnv1a64("synth_means")));
    MatrixX<Scalar> m = random_normal<Scalar>(num_classes, feature_dim, Scalar(1), rng);
    for (Index c = 0; c < num_classes; ++c) m.row(c) *= Scalar(2) / m.row(c).norm();
    return m;
  }

  // direction whose coefficient sweeps -1..1 over each segment, the way real
  // per-frame descriptors carry within-action progress
  template <typename Scalar>
  MatrixX<Scalar> phase_direction() const {
    Rng rng(derive_seed(seed, fnv1a64("synth_phase")));
    MatrixX<Scalar> d = random_normal<Scalar>(1, feature_dim, Scalar(1), rng);
    d *= Scalar(phase_scale) / d.norm();
    return d;
  }

  std::vector<std::string> class_names() const {
    std::vector<std::string> names;
    for (int c = 0; c < num_classes; ++c) names.push_back("action_" + std::to_string(c));
    return names;
  }
};

template <typename Scalar>
std::vector<VideoRecord<Scalar>> synth_corpus(const SynthGrammar& g, int count, Index t_min,
                                              Index t_max, const std::string& id_prefix = "synth") {
  const MatrixX<Scalar> means = g.class_means<Scalar>();
  const MatrixX<Scalar> phase_dir = g.phase_direction<Scalar>();
  std::vector<VideoRecord<Scalar>> records;
  for (int v = 0; v < count; ++v) {
    Rng rng(derive_seed(g.seed, fnv1a64(id_prefix) + std::uint64_t(v) + 1));
    VideoRecord<Scalar> rec;
    {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%04d", v);
      rec.id = id_prefix + "_" + buf;
    }
    const Index frames = std::uniform_int_distribution<Index>(t_min, t_max)(rng);
    int cls = std::uniform_int_distribution<int>(0, g.num_classes - 1)(rng);
    // random phase-in, on the quantization grid
    const Index steps = g.duration[size_t(cls)] / g.quantize;
    Index remaining = std::uniform_int_distribution<Index>(1, steps)(rng) * g.quantize;
    rec.gt_labels.reserve(size_t(frames));
    std::vector<Scalar> progress;
    progress.reserve(size_t(frames));
    for (Index f = 0; f < frames; ++f) {
      rec.gt_labels.push_back(cls);
      const Index dur = g.duration[size_t(cls)];
      progress.push_back(Scalar(2) * Scalar(dur - remaining) / Scalar(dur) - Scalar(1));
      if (--remaining == 0) {
        cls = g.next[size_t(cls)];
        remaining = g.duration[size_t(cls)];
      }
    }
    rec.features = random_normal<Scalar>(frames, g.feature_dim, Scalar(g.feature_noise), rng);
    // noise lives orthogonal to the phase direction: progress stays readable
    // exactly, class identity stays noisy
    const MatrixX<Scalar> unit_phase = phase_dir / phase_dir.norm();
    for (Index f = 0; f < frames; ++f) {
      const Scalar along = rec.features.row(f).dot(unit_phase.row(0));
      rec.features.row(f) -= along * unit_phase.row(0);
      rec.features.row(f) += means.row(rec.gt_labels[size_t(f)]);
      rec.features.row(f) += progress[size_t(f)] * phase_dir.row(0);
    }
    records.push_back(std::move(rec));
  }
  return records;
}

// ---------------------------------------------------------------------------
// on-disk layout
//
//   mapping.txt               "id<space>action_name" per line, ids 0..K-1
//   groundTruth/<id>.txt      one action name per line
//   features/<id>.feat        "AFV1", u32 rows, u32 cols, f32 row-major
//   bundles/<split>.txt       one video id per line
//   predicted/<id>.txt        optional, same shape as groundTruth

namespace fs_detail {
inline std::ifstream open_or_throw(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ParseError("cannot open " + p.string());
  return in;
}
}  // namespace fs_detail

template <typename Scalar>
MatrixX<Scalar> read_features(const std::filesystem::path& path) {
  std::ifstream in = fs_detail::open_or_throw(path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "AFV1")
    throw ParseError("feature file " + path.string() + ": bad magic");
  std::uint32_t rows = 0, cols = 0;
  in.read(reinterpret_cast<char*>(&rows), 4);
  in.read(reinterpret_cast<char*>(&cols), 4);
  if (!in) throw ParseError("feature file " + path.string() + ": truncated header");
  std::vector<float> buf(size_t(rows) * cols);
  in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * 4));
  if (!in) throw ParseError("feature file " + path.string() + ": truncated data");
  MatrixX<Scalar> m(static_cast<Index>(rows), static_cast<Index>(cols));
  for (Index i = 0; i < m.size(); ++i) m(i) = Scalar(buf[size_t(i)]);
  return m;
}

template <typename Scalar>
void write_features(const std::filesystem::path& path, const MatrixX<Scalar>& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write " + path.string());
  out.write("AFV1", 4);
  const std::uint32_t rows = std::uint32_t(m.rows()), cols = std::uint32_t(m.cols());
  out.write(reinterpret_cast<const char*>(&rows), 4);
  out.write(reinterpret_cast<const char*>(&cols), 4);
  std::vector<float> buf(size_t(m.size()));
  for (Index i = 0; i < m.size(); ++i) buf[size_t(i)] = float(m(i));
  out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * 4));
}

inline Vocabulary load_mapping(const std::filesystem::path& path, int token_buckets = 512) {
  std::ifstream in = fs_detail::open_or_throw(path);
  std::vector<std::pair<int, std::string>> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    int id;
    std::string name;
    if (!(ss >> id >> name))
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected 'id name'");
    entries.emplace_back(id, name);
  }
  std::vector<std::string> names(entries.size());
  std::vector<bool> seen(entries.size(), false);
  for (const auto& [id, name] : entries) {
    if (id < 0 || size_t(id) >= entries.size() || seen[size_t(id)])
      throw ParseError(path.string() + ": duplicate or non-dense class id " + std::to_string(id));
    seen[size_t(id)] = true;
    names[size_t(id)] = name;
  }
  return Vocabulary::from_names(std::move(names), token_buckets);
}

inline std::vector<int> load_label_file(const std::filesystem::path& path,
                                        const Vocabulary& vocab) {
  std::ifstream in = fs_detail::open_or_throw(path);
  std::vector<int> labels;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty()) continue;
    const auto it = vocab.ids.find(line);
    if (it == vocab.ids.end())
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": unknown action name '" +
                       line + "'");
    labels.push_back(it->second);
  }
  return labels;
}

template <typename Scalar>
std::vector<VideoRecord<Scalar>> load_split(const std::filesystem::path& root,
                                            const std::string& bundle, Vocabulary& vocab_out,
                                            int token_buckets = 512) {
  namespace fs = std::filesystem;
  vocab_out = load_mapping(root / "mapping.txt", token_buckets);

  std::ifstream in = fs_detail::open_or_throw(root / "bundles" / (bundle + ".txt"));
  std::vector<VideoRecord<Scalar>> records;
  std::string id;
  while (std::getline(in, id)) {
    while (!id.empty() && (id.back() == '\r' || id.back() == ' ')) id.pop_back();
    if (id.empty()) continue;
    VideoRecord<Scalar> rec;
    rec.id = id;
    rec.gt_labels = load_label_file(root / "groundTruth" / (id + ".txt"), vocab_out);
    rec.features = read_features<Scalar>(root / "features" / (id + ".feat"));
    if (rec.features.rows() != rec.frames())
      throw ParseError("video '" + id + "': feature rows (" +
                       std::to_string(rec.features.rows()) + ") != label count (" +
                       std::to_string(rec.frames()) + ")");
    if (rec.frames() < 1) throw ParseError("video '" + id + "': empty ground truth");
    const fs::path pred = root / "predicted" / (id + ".txt");
    if (fs::exists(pred)) {
      auto labels = load_label_file(pred, vocab_out);
      if (Index(labels.size()) != rec.frames())
        throw ParseError("video '" + id + "': predicted label count mismatch");
      rec.predicted_labels = std::move(labels);
    }
    records.push_back(std::move(rec));
  }
  return records;
}

template <typename Scalar>
void write_dataset(const std::filesystem::path& root, const Vocabulary& vocab,
                   const std::vector<VideoRecord<Scalar>>& records,
                   const std::vector<std::pair<std::string, std::vector<std::string>>>& bundles) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "groundTruth");
  fs::create_directories(root / "features");
  fs::create_directories(root / "bundles");

  std::ofstream map(root / "mapping.txt");
  for (int c = 0; c < vocab.num_classes(); ++c) map << c << " " << vocab.names[size_t(c)] << "\n";

  for (const auto& rec : records) {
    std::ofstream gt(root / "groundTruth" / (rec.id + ".txt"));
    for (int l : rec.gt_labels) gt << vocab.names[size_t(l)] << "\n";
    write_features(root / "features" / (rec.id + ".feat"), rec.features);
    if (rec.predicted_labels) {
      fs::create_directories(root / "predicted");
      std::ofstream pred(root / "predicted" / (rec.id + ".txt"));
      for (int l : *rec.predicted_labels) pred << vocab.names[size_t(l)] << "\n";
    }
  }
  for (const auto& [split, ids] : bundles) {
    std::ofstream b(root / "bundles" / (split + ".txt"));
    for (const auto& vid : ids) b << vid << "\n";
  }
}

}  // namespace lta
