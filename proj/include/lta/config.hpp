#pragma once

// Run configuration: model dimensions, optimizer settings, dataset presets and
// the flat key=value config-file format. The model block has a canonical text
// form whose FNV-1a hash is embedded in checkpoints and reports.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lta/types.hpp"

namespace lta {

struct ModelConfig {
  int num_classes = 0;   // K; set from the dataset vocabulary
  int feature_dim = 64;  // width of the per-frame visual features
  int embed_dim = 64;    // backbone width (token embedding size)
  int cmib_dim = 128;    // cross-modality block width
  int adapter_mid = 0;   // feature-adapter hidden width; 0 -> embed_dim/2
  int tune_mid = 4;      // action-tuning bottleneck width
  int num_queries = 20;
  int cmib_heads = 4;
  int cmib_depth = 1;
  int cmib_ffn_dim = 0;  // 0 -> 4*cmib_dim
  int stub_depth = 2;
  int stub_heads = 4;
  int stub_ffn_dim = 0;  // 0 -> 4*embed_dim
  int token_buckets = 512;
  double rms_eps = 1e-6;
  double dropout = 0.1;
  double query_init = 0.5;
  double stub_gain = 1.0;  // scales the frozen stub's weight magnitudes
  std::uint64_t seed = 1;
  std::uint64_t frozen_seed = 7;  // embedding + stub fixture, independent of the run seed
  bool shared_projections = false;
  bool shared_past_head = false;
  bool tuning_residual = false;
  bool disable_text = false;

  void finalize() {
    if (adapter_mid == 0) adapter_mid = std::max(1, embed_dim / 2);
    if (cmib_ffn_dim == 0) cmib_ffn_dim = 4 * cmib_dim;
    if (stub_ffn_dim == 0) stub_ffn_dim = 4 * embed_dim;
  }

  std::string canonical() const {
    std::ostringstream os;
    os << "num_classes=" << num_classes << "\nfeature_dim=" << feature_dim
       << "\nembed_dim=" << embed_dim << "\ncmib_dim=" << cmib_dim
       << "\nadapter_mid=" << adapter_mid << "\ntune_mid=" << tune_mid
       << "\nnum_queries=" << num_queries << "\ncmib_heads=" << cmib_heads
       << "\ncmib_depth=" << cmib_depth << "\ncmib_ffn_dim=" << cmib_ffn_dim
       << "\nstub_depth=" << stub_depth << "\nstub_heads=" << stub_heads
       << "\nstub_ffn_dim=" << stub_ffn_dim << "\ntoken_buckets=" << token_buckets
       << "\nrms_eps=" << rms_eps << "\ndropout=" << dropout << "\nquery_init=" << query_init
       << "\nstub_gain=" << stub_gain << "\nseed=" << seed << "\nfrozen_seed=" << frozen_seed
       << "\nshared_projections=" << shared_projections
       << "\nshared_past_head=" << shared_past_head << "\ntuning_residual=" << tuning_residual
       << "\ndisable_text=" << disable_text << "\n";
    return os.str();
  }

  std::uint64_t hash() const { return fnv1a64(canonical()); }
};

struct SynthSettings {
  int classes = 8;
  int train_videos = 60;
  int eval_videos = 20;
  int t_min = 160;
  int t_max = 160;
  int dur_min = 44;
  int dur_max = 60;
  int quantize = 0;  // 0 -> use the sampling rate
  double feature_noise = 0.5;
  double phase_scale = 1.0;
  std::uint64_t seed = 42;  // corpus fixture seed, independent of the run seed
};

struct RunConfig {
  ModelConfig model;

  std::string preset = "synthetic";  // breakfast | salads50 | synthetic
  std::string data_dir;              // empty + synthetic preset -> in-memory corpus
  std::string out_dir = "out";
  std::string train_bundle = "train";
  std::string eval_bundle = "eval";

  double lr = 1e-3;
  std::string lr_schedule = "constant";  // constant | cosine
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 20;
  int batch_size = 1;
  double grad_clip = 0.0;  // 0 disables clipping
  double val_fraction = 0.1;

  double noise_p = 0.2;
  int sample_rate = 8;  // frames between observation samples
  int start_max = 0;    // training start frame drawn from [0, start_max]
  double train_beta = 0.5;
  std::vector<double> train_alphas = {0.2, 0.3};
  std::vector<double> alphas = {0.2, 0.3};
  std::vector<double> betas = {0.1, 0.2, 0.3, 0.5};

  bool loss_mean = false;
  bool freeze_audit = false;

  SynthSettings synth;
};

inline void apply_preset(RunConfig& cfg, const std::string& name) {
  cfg.preset = name;
  if (name == "breakfast") {
    cfg.sample_rate = 6;
    cfg.start_max = 0;
    cfg.lr = 1e-4;
    cfg.train_alphas = {0.2, 0.3, 0.5};
  } else if (name == "salads50") {
    cfg.sample_rate = 8;
    cfg.start_max = 7;
    cfg.lr = 1e-3;
    cfg.train_alphas = {0.1, 0.2, 0.3, 0.4, 0.5};
  } else if (name == "synthetic") {
    cfg.sample_rate = 4;
    cfg.start_max = 0;
    cfg.lr = 3e-3;
    cfg.lr_schedule = "cosine";
    cfg.grad_clip = 1.0;
    // every alpha puts the observation boundary on the sampling grid at T=160
    cfg.train_alphas = {0.15, 0.175, 0.2, 0.225, 0.25, 0.275, 0.3, 0.325, 0.35, 0.375, 0.4};
    cfg.noise_p = 0.0;
    cfg.model.feature_dim = 16;
    cfg.model.embed_dim = 64;
    cfg.model.cmib_dim = 32;
    cfg.model.num_queries = 8;
    cfg.model.cmib_heads = 8;
    cfg.model.cmib_depth = 2;
    cfg.model.dropout = 0.0;
    cfg.model.tuning_residual = true;
  } else {
    throw InputError("unknown preset '" + name + "' (expected breakfast|salads50|synthetic)");
  }
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw ParseError("config: bad boolean for " + key + ": '" + v + "'");
}

}  // namespace detail

// Applies one key=value setting; throws ParseError on unknown keys so typos
// in config files surface immediately.
inline void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto& m = cfg.model;
  if (key == "preset") apply_preset(cfg, value);
  else if (key == "num_classes") m.num_classes = std::stoi(value);
  else if (key == "feature_dim") m.feature_dim = std::stoi(value);
  else if (key == "embed_dim") m.embed_dim = std::stoi(value);
  else if (key == "cmib_dim") m.cmib_dim = std::stoi(value);
  else if (key == "adapter_mid") m.adapter_mid = std::stoi(value);
  else if (key == "tune_mid") m.tune_mid = std::stoi(value);
  else if (key == "num_queries") m.num_queries = std::stoi(value);
  else if (key == "cmib_heads") m.cmib_heads = std::stoi(value);
  else if (key == "cmib_depth") m.cmib_depth = std::stoi(value);
  else if (key == "cmib_ffn_dim") m.cmib_ffn_dim = std::stoi(value);
  else if (key == "stub_depth") m.stub_depth = std::stoi(value);
  else if (key == "stub_heads") m.stub_heads = std::stoi(value);
  else if (key == "stub_ffn_dim") m.stub_ffn_dim = std::stoi(value);
  else if (key == "token_buckets") m.token_buckets = std::stoi(value);
  else if (key == "rms_eps") m.rms_eps = std::stod(value);
  else if (key == "dropout") m.dropout = std::stod(value);
  else if (key == "query_init") m.query_init = std::stod(value);
  else if (key == "stub_gain") m.stub_gain = std::stod(value);
  else if (key == "seed") m.seed = std::stoull(value);
  else if (key == "frozen_seed") m.frozen_seed = std::stoull(value);
  else if (key == "shared_projections") m.shared_projections = detail::parse_bool(value, key);
  else if (key == "shared_past_head") m.shared_past_head = detail::parse_bool(value, key);
  else if (key == "tuning_residual") m.tuning_residual = detail::parse_bool(value, key);
  else if (key == "disable_text") m.disable_text = detail::parse_bool(value, key);
  else if (key == "data_dir") cfg.data_dir = value;
  else if (key == "out_dir") cfg.out_dir = value;
  else if (key == "train_bundle") cfg.train_bundle = value;
  else if (key == "eval_bundle") cfg.eval_bundle = value;
  else if (key == "lr") cfg.lr = std::stod(value);
  else if (key == "lr_schedule") cfg.lr_schedule = value;
  else if (key == "adam_beta1") cfg.adam_beta1 = std::stod(value);
  else if (key == "adam_beta2") cfg.adam_beta2 = std::stod(value);
  else if (key == "adam_eps") cfg.adam_eps = std::stod(value);
  else if (key == "epochs") cfg.epochs = std::stoi(value);
  else if (key == "batch_size") cfg.batch_size = std::stoi(value);
  else if (key == "grad_clip") cfg.grad_clip = std::stod(value);
  else if (key == "val_fraction") cfg.val_fraction = std::stod(value);
  else if (key == "noise_p") cfg.noise_p = std::stod(value);
  else if (key == "sample_rate") cfg.sample_rate = std::stoi(value);
  else if (key == "start_max") cfg.start_max = std::stoi(value);
  else if (key == "train_beta") cfg.train_beta = std::stod(value);
  else if (key == "train_alphas") cfg.train_alphas = detail::parse_double_list(value);
  else if (key == "alphas") cfg.alphas = detail::parse_double_list(value);
  else if (key == "betas") cfg.betas = detail::parse_double_list(value);
  else if (key == "loss_mean") cfg.loss_mean = detail::parse_bool(value, key);
  else if (key == "freeze_audit") cfg.freeze_audit = detail::parse_bool(value, key);
  else if (key == "synth_classes") cfg.synth.classes = std::stoi(value);
  else if (key == "synth_train_videos") cfg.synth.train_videos = std::stoi(value);
  else if (key == "synth_eval_videos") cfg.synth.eval_videos = std::stoi(value);
  else if (key == "synth_t_min") cfg.synth.t_min = std::stoi(value);
  else if (key == "synth_t_max") cfg.synth.t_max = std::stoi(value);
  else if (key == "synth_dur_min") cfg.synth.dur_min = std::stoi(value);
  else if (key == "synth_dur_max") cfg.synth.dur_max = std::stoi(value);
  else if (key == "synth_quantize") cfg.synth.quantize = std::stoi(value);
  else if (key == "synth_seed") cfg.synth.seed = std::stoull(value);
  else if (key == "synth_feature_noise") cfg.synth.feature_noise = std::stod(value);
  else if (key == "synth_phase_scale") cfg.synth.phase_scale = std::stod(value);
  else throw ParseError("config: unknown key '" + key + "'");
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("config: cannot open " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected key=value");
    try {
      set_config_key(cfg, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline std::string format_double_list(const std::vector<double>& v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

inline std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream os;
  os << "preset=" << cfg.preset << "\n";
  os << cfg.model.canonical();
  os << "data_dir=" << cfg.data_dir << "\nout_dir=" << cfg.out_dir
     << "\ntrain_bundle=" << cfg.train_bundle << "\neval_bundle=" << cfg.eval_bundle
     << "\nlr=" << cfg.lr << "\nlr_schedule=" << cfg.lr_schedule
     << "\nadam_beta1=" << cfg.adam_beta1 << "\nadam_beta2=" << cfg.adam_beta2
     << "\nadam_eps=" << cfg.adam_eps << "\nepochs=" << cfg.epochs
     << "\nbatch_size=" << cfg.batch_size << "\ngrad_clip=" << cfg.grad_clip
     << "\nval_fraction=" << cfg.val_fraction
     << "\nnoise_p=" << cfg.noise_p << "\nsample_rate=" << cfg.sample_rate
     << "\nstart_max=" << cfg.start_max << "\ntrain_beta=" << cfg.train_beta
     << "\ntrain_alphas=" << format_double_list(cfg.train_alphas)
     << "\nalphas=" << format_double_list(cfg.alphas)
     << "\nbetas=" << format_double_list(cfg.betas) << "\nloss_mean=" << cfg.loss_mean
     << "\nfreeze_audit=" << cfg.freeze_audit << "\nsynth_classes=" << cfg.synth.classes
     << "\nsynth_train_videos=" << cfg.synth.train_videos
     << "\nsynth_eval_videos=" << cfg.synth.eval_videos << "\nsynth_t_min=" << cfg.synth.t_min
     << "\nsynth_t_max=" << cfg.synth.t_max << "\nsynth_dur_min=" << cfg.synth.dur_min
     << "\nsynth_dur_max=" << cfg.synth.dur_max << "\nsynth_quantize=" << cfg.synth.quantize
     << "\nsynth_seed=" << cfg.synth.seed
     << "\nsynth_feature_noise=" << cfg.synth.feature_noise
     << "\nsynth_phase_scale=" << cfg.synth.phase_scale << "\n";
  return os.str();
}

}  // namespace lta
