// Long-term action anticipation trainer/evaluator.
//
// Subcommands: train, eval, predict, gradcheck, synth, sweep, params.
// Exit codes: 0 success, 1 input/parse error, 2 integrity error,
// 3 numeric failure.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lta/checkpoint.hpp"
#include "lta/config.hpp"
#include "lta/datapipe.hpp"
#include "lta/evalkit.hpp"
#include "lta/gradcheck.hpp"
#include "lta/objective.hpp"
#include "lta/train.hpp"

namespace fs = std::filesystem;
using lta::Index;

namespace {

struct DataBundle {
  lta::Vocabulary vocab;
  std::vector<lta::VideoRecord<float>> train;
  std::vector<lta::VideoRecord<float>> eval;
};

lta::SynthGrammar grammar_for(const lta::RunConfig& cfg) {
  const int quantize = cfg.synth.quantize > 0 ? cfg.synth.quantize : cfg.sample_rate;
  return lta::SynthGrammar::make(cfg.synth.classes, cfg.model.feature_dim, cfg.synth.dur_min,
                                 cfg.synth.dur_max, cfg.synth.feature_noise,
                                 lta::derive_seed(cfg.synth.seed, lta::fnv1a64("synth")),
                                 quantize, cfg.synth.phase_scale);
}

DataBundle resolve_data(const lta::RunConfig& cfg) {
  DataBundle data;
  if (cfg.data_dir.empty()) {
    if (cfg.preset != "synthetic")
      throw lta::InputError("preset '" + cfg.preset + "' needs --data <dataset dir>");
    const auto grammar = grammar_for(cfg);
    data.vocab = lta::Vocabulary::from_names(grammar.class_names(), cfg.model.token_buckets);
    data.train = lta::synth_corpus<float>(grammar, cfg.synth.train_videos, cfg.synth.t_min,
                                          cfg.synth.t_max, "train");
    data.eval = lta::synth_corpus<float>(grammar, cfg.synth.eval_videos, cfg.synth.t_min,
                                         cfg.synth.t_max, "eval");
    return data;
  }
  data.train = lta::load_split<float>(cfg.data_dir, cfg.train_bundle, data.vocab,
                                      cfg.model.token_buckets);
  lta::Vocabulary unused;
  data.eval =
      lta::load_split<float>(cfg.data_dir, cfg.eval_bundle, unused, cfg.model.token_buckets);
  return data;
}

lta::Model<float> build_run_model(lta::RunConfig& cfg, const DataBundle& data) {
  cfg.model.num_classes = data.vocab.num_classes();
  return lta::Model<float>::build(cfg.model, data.vocab);
}

void print_counts(lta::Model<float>& model) {
  const auto counts = lta::count_params(model);
  std::cout << "parameters: learnable=" << counts.learnable << " frozen=" << counts.frozen
            << "\n";
}

int cmd_train(lta::RunConfig cfg) {
  auto data = resolve_data(cfg);
  auto model = build_run_model(cfg, data);
  print_counts(model);
  std::cout << "training on " << data.train.size() << " videos, " << cfg.epochs << " epochs, lr "
            << cfg.lr << "\n";

  const auto result = lta::train_model(model, data.train, cfg, &std::cout, /*restore_best=*/false);

  fs::create_directories(cfg.out_dir);
  const fs::path final_path = fs::path(cfg.out_dir) / "final.ckpt";
  const fs::path best_path = fs::path(cfg.out_dir) / "best.ckpt";
  lta::save_checkpoint(model, final_path);
  lta::apply_param_snapshot(model, result.best_values);
  lta::save_checkpoint(model, best_path);
  std::cout << "best epoch " << result.best_epoch + 1 << " (val_total=" << result.best_val
            << ")\nwrote " << final_path.string() << " and " << best_path.string() << "\n";
  return 0;
}

int cmd_eval(lta::RunConfig cfg, const std::string& checkpoint) {
  auto data = resolve_data(cfg);
  auto model = build_run_model(cfg, data);
  lta::load_checkpoint(model, checkpoint);

  auto report = lta::evaluate_grid(model, data.eval, cfg.alphas, cfg.betas, cfg.sample_rate,
                                   cfg.train_beta);
  report.split = cfg.eval_bundle;
  report.seed = cfg.model.seed;

  fs::create_directories(cfg.out_dir);
  const fs::path report_path = fs::path(cfg.out_dir) / "report.txt";
  report.write(report_path);
  std::cout << report.to_table() << "\n" << report.to_kv() << "wrote " << report_path.string()
            << "\n";
  return 0;
}

int cmd_predict(lta::RunConfig cfg, const std::string& checkpoint, const std::string& video_id) {
  auto data = resolve_data(cfg);
  auto model = build_run_model(cfg, data);
  lta::load_checkpoint(model, checkpoint);

  const lta::VideoRecord<float>* video = nullptr;
  for (const auto& rec : data.eval)
    if (rec.id == video_id) video = &rec;
  for (const auto& rec : data.train)
    if (!video && rec.id == video_id) video = &rec;
  if (!video) throw lta::InputError("video '" + video_id + "' not found in either split");

  const double alpha = cfg.alphas.front();
  double beta = cfg.train_beta;
  for (double b : cfg.betas) beta = std::max(beta, b);
  const lta::ObservationSpec spec{alpha, beta, cfg.sample_rate, 0};
  const auto obs = lta::sample_observation(*video, spec);
  lta::SampleInput<float> input;
  input.past_labels = obs.predicted_labels ? *obs.predicted_labels : obs.gt_labels;
  input.features = obs.features;
  const auto pack = lta::model_forward(model, input);
  const auto pred = lta::decode_predictions(pack.future_class_logits, pack.durations,
                                            obs.horizon_frames, model.vocab.none_id());
  const auto gt = lta::expand_segments(obs.horizon);

  fs::create_directories(cfg.out_dir);
  const fs::path base = fs::path(cfg.out_dir) / (video_id + "_timeline");
  lta::emit_timeline(pred, gt, model.vocab, base);
  std::cout << "alpha=" << alpha << " beta=" << beta << " horizon=" << obs.horizon_frames
            << " frames\nwrote " << base.string() << ".txt and " << base.string() << ".svg\n";
  return 0;
}

// double-precision finite-difference suite at tiny dimensions
int cmd_gradcheck(lta::RunConfig cfg) {
  using Mat = lta::MatrixX<double>;
  const double threshold = 1e-4;
  bool ok = true;
  lta::Rng rng(cfg.model.seed + 17);

  auto report_line = [&](const std::string& name, const lta::GradCheckReport& r) {
    const bool pass = r.max_rel_err < threshold;
    ok = ok && pass;
    std::cout << "gradcheck " << name << ": max_rel_err=" << r.max_rel_err << " ("
              << r.checked_entries << " entries) " << (pass ? "PASS" : "FAIL") << "\n";
  };

  {
    lta::CmiaWeights<double> w(4, 2);
    w.init_random(rng, 0.5);
    const Mat t = lta::random_normal<double>(3, 4, 1.0, rng);
    const Mat v = lta::random_normal<double>(3, 4, 1.0, rng);
    const Mat q = lta::random_normal<double>(2, 4, 1.0, rng);
    const Mat pt = lta::random_normal<double>(3, 4, 1.0, rng);
    const Mat pv = lta::random_normal<double>(3, 4, 1.0, rng);
    const Mat pq = lta::random_normal<double>(2, 4, 1.0, rng);
    auto loss_only = [&] {
      const auto out = lta::cmia_forward(t, v, q, w);
      return out[0].cwiseProduct(pt).sum() + out[1].cwiseProduct(pv).sum() +
             out[2].cwiseProduct(pq).sum();
    };
    auto loss_and_grad = [&] {
      const auto out = lta::cmia_forward(t, v, q, w);
      lta::cmia_backward<double>({pt, pv, pq}, t, v, q, w);
      return out[0].cwiseProduct(pt).sum() + out[1].cwiseProduct(pv).sum() +
             out[2].cwiseProduct(pq).sum();
    };
    auto visit = [&](auto&& fn) { w.visit("cmia", fn); };
    report_line("cmia_forward", lta::grad_check(loss_and_grad, loss_only, visit));
  }

  {
    lta::CmibParams<double> p(8, 2, 12, 1, 1e-4);
    p.init_random(rng, 0.4);
    const Mat t = lta::random_normal<double>(3, 8, 1.0, rng);
    const Mat v = lta::random_normal<double>(3, 8, 1.0, rng);
    const Mat q = lta::random_normal<double>(2, 8, 1.0, rng);
    const Mat pt = lta::random_normal<double>(3, 8, 1.0, rng);
    const Mat pv = lta::random_normal<double>(3, 8, 1.0, rng);
    const Mat pq = lta::random_normal<double>(2, 8, 1.0, rng);
    auto loss_of = [&](const std::array<Mat, 3>& out) {
      return out[0].cwiseProduct(pt).sum() + out[1].cwiseProduct(pv).sum() +
             out[2].cwiseProduct(pq).sum();
    };
    auto loss_only = [&] { return loss_of(lta::cmib_forward(t, v, q, p)); };
    auto loss_and_grad = [&] {
      lta::CmibTrace<double> trace;
      const auto out = lta::cmib_forward(t, v, q, p, &trace);
      lta::cmib_backward<double>({pt, pv, pq}, p, trace);
      return loss_of(out);
    };
    auto visit = [&](auto&& fn) { p.visit("cmib", fn); };
    report_line("cmib_forward", lta::grad_check(loss_and_grad, loss_only, visit));
  }

  {
    lta::TuningWeights<double> t(6, 2, 0.0);
    t.init_random(rng);
    const Mat f = lta::random_normal<double>(4, 6, 1.0, rng);
    const Mat pr = lta::random_normal<double>(4, 6, 1.0, rng);
    const Mat no_mask(0, 0);
    auto loss_only = [&] { return lta::action_tuning(f, t, false).cwiseProduct(pr).sum(); };
    auto loss_and_grad = [&] {
      const Mat out = lta::action_tuning(f, t, false);
      lta::action_tuning_backward(pr, f, t, no_mask);
      return out.cwiseProduct(pr).sum();
    };
    auto visit = [&](auto&& fn) { t.visit("tuning", fn); };
    report_line("action_tuning", lta::grad_check(loss_and_grad, loss_only, visit));
  }

  {
    lta::ModelConfig mc;
    mc.num_classes = 3;
    mc.feature_dim = 6;
    mc.embed_dim = 8;
    mc.cmib_dim = 4;
    mc.adapter_mid = 4;
    mc.tune_mid = 2;
    mc.num_queries = 2;
    mc.cmib_heads = 2;
    mc.stub_heads = 2;
    mc.stub_depth = 1;
    mc.token_buckets = 16;
    mc.dropout = 0.0;
    mc.rms_eps = 1e-5;
    mc.seed = cfg.model.seed;
    auto vocab = lta::Vocabulary::from_names({"pour", "cut", "mix"}, 16);
    auto model = lta::Model<double>::build(mc, vocab);
    lta::SampleInput<double> sample;
    sample.past_labels = {0, 2, 1};
    sample.features = lta::random_normal<double>(3, 6, 1.0, rng);
    const std::vector<lta::Segment> future = {{0, 4}, {2, 6}};
    const auto targets = lta::build_targets<double>(sample.past_labels, future, 2, 10, vocab);
    auto loss_only = [&] {
      return double(lta::total_loss(lta::model_forward(model, sample), targets).total);
    };
    auto loss_and_grad = [&] {
      lta::ForwardTrace<double> trace;
      const auto pack = lta::model_forward(model, sample, false, nullptr, &trace);
      const auto loss = lta::total_loss(pack, targets);
      lta::model_backward(model, sample, trace, pack,
                          lta::total_loss_backward(pack, targets));
      return double(loss.total);
    };
    auto visit = [&](auto&& fn) { model.visit_params(fn); };
    report_line("model_forward+total_loss", lta::grad_check(loss_and_grad, loss_only, visit));
  }

  if (!ok) throw lta::NumericError("gradient check failed (threshold 1e-4)");
  std::cout << "PASS max_rel_err < 1e-4\n";
  return 0;
}

int cmd_synth(lta::RunConfig cfg, const std::string& out_dir) {
  const auto grammar = grammar_for(cfg);
  const auto vocab = lta::Vocabulary::from_names(grammar.class_names(), cfg.model.token_buckets);
  auto train = lta::synth_corpus<float>(grammar, cfg.synth.train_videos, cfg.synth.t_min,
                                        cfg.synth.t_max, "train");
  const auto eval = lta::synth_corpus<float>(grammar, cfg.synth.eval_videos, cfg.synth.t_min,
                                             cfg.synth.t_max, "eval");

  std::vector<std::string> train_ids, eval_ids;
  for (const auto& r : train) train_ids.push_back(r.id);
  for (const auto& r : eval) eval_ids.push_back(r.id);
  train.insert(train.end(), eval.begin(), eval.end());
  lta::write_dataset(out_dir, vocab, train, {{"train", train_ids}, {"eval", eval_ids}});
  std::cout << "wrote " << train_ids.size() << " train and " << eval_ids.size()
            << " eval videos under " << out_dir << " (" << grammar.num_classes << " classes)\n";
  return 0;
}

int cmd_sweep(lta::RunConfig cfg, const std::string& axis, const std::vector<int>& values) {
  if (axis != "N" && axis != "d_c" && axis != "L_MA")
    throw lta::InputError("unknown sweep axis '" + axis + "' (expected N|d_c|L_MA)");
  if (values.empty()) throw lta::InputError("sweep: no values given");

  // one MoC column per beta at the largest alpha, plus the grid average
  const double alpha = cfg.alphas.back();
  std::cout << std::setw(8) << std::left << axis;
  for (double b : cfg.betas) {
    std::ostringstream h;
    h << "b" << b;
    std::cout << std::setw(10) << std::right << h.str();
  }
  std::cout << std::setw(10) << std::right << "avg" << std::setw(12) << std::right << "learnable"
            << "\n";

  for (int value : values) {
    lta::RunConfig run = cfg;
    if (axis == "N") run.model.num_queries = value;
    else if (axis == "d_c") run.model.cmib_dim = value;
    else run.model.tune_mid = value;
    run.model.cmib_ffn_dim = 0;  // re-derive from the new width
    run.model.finalize();

    auto data = resolve_data(run);
    auto model = build_run_model(run, data);
    lta::train_model(model, data.train, run, nullptr);
    const auto report = lta::evaluate_grid(model, data.eval, {alpha}, run.betas, run.sample_rate,
                                           run.train_beta);
    std::cout << std::setw(8) << std::left << value << std::fixed << std::setprecision(4);
    for (double cell : report.cells[0]) std::cout << std::setw(10) << std::right << cell;
    std::cout << std::setw(10) << std::right << report.average << std::setw(12) << std::right
              << lta::count_params(model).learnable << "\n"
              << std::defaultfloat;
  }
  return 0;
}

int cmd_params(lta::RunConfig cfg) {
  lta::Vocabulary vocab;
  if (!cfg.data_dir.empty()) {
    vocab = lta::load_mapping(fs::path(cfg.data_dir) / "mapping.txt", cfg.model.token_buckets);
  } else {
    std::vector<std::string> names;
    const int k = cfg.model.num_classes > 0 ? cfg.model.num_classes : cfg.synth.classes;
    for (int c = 0; c < k; ++c) names.push_back("action_" + std::to_string(c));
    vocab = lta::Vocabulary::from_names(names, cfg.model.token_buckets);
  }
  cfg.model.num_classes = vocab.num_classes();
  auto model = lta::Model<float>::build(cfg.model, vocab);
  const auto counts = lta::count_params(model);
  std::cout << "learnable=" << counts.learnable << "\nfrozen=" << counts.frozen << "\n";
  std::cout << "config_hash=" << std::hex << cfg.model.hash() << std::dec << "\n";
  std::cout << "reference (full-scale 7B-backbone configuration, not reproduced at this scale): "
               "learnable=4.21M frozen=7B\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"long-term action anticipation from past labels and visual features"};
  app.require_subcommand(1);

  lta::RunConfig cfg;
  std::string config_file, preset, checkpoint, video_id, axis, synth_out = "synth_data";
  std::string alphas_csv, betas_csv;
  std::vector<int> sweep_values;
  std::optional<int> queries, cmib_dim, tune_dim, epochs;
  std::optional<double> noise_p, lr;
  std::optional<std::uint64_t> seed;
  bool loss_mean = false, shared_projections = false, shared_past_head = false;
  bool tuning_residual = false, freeze_audit = false, disable_text = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_file, "flat key=value config file");
    cmd->add_option("--preset", preset, "breakfast|salads50|synthetic");
    cmd->add_option("--data", cfg.data_dir, "dataset root directory");
    cmd->add_option("--out", cfg.out_dir, "output directory");
    cmd->add_option("--alpha", alphas_csv, "comma-separated observation ratios");
    cmd->add_option("--beta", betas_csv, "comma-separated prediction ratios");
    cmd->add_option("--queries", queries, "number of action queries");
    cmd->add_option("--cmib-dim", cmib_dim, "cross-modality block width");
    cmd->add_option("--tune-dim", tune_dim, "action-tuning bottleneck width");
    cmd->add_option("--noise-p", noise_p, "training text-noise probability");
    cmd->add_option("--seed", seed, "run seed");
    cmd->add_option("--epochs", epochs, "training epochs");
    cmd->add_option("--lr", lr, "learning rate");
    cmd->add_flag("--loss-mean", loss_mean, "normalize each loss by counted positions");
    cmd->add_flag("--shared-projections", shared_projections,
                  "share one down/up projection across modalities");
    cmd->add_flag("--shared-past-head", shared_past_head,
                  "one classifier for both past streams");
    cmd->add_flag("--tuning-residual", tuning_residual, "residual around action tuning");
    cmd->add_flag("--freeze-audit", freeze_audit, "verify frozen params after training");
    cmd->add_flag("--disable-text", disable_text, "zero the text stream and drop its loss");
  };

  auto* train = app.add_subcommand("train", "train a model and write checkpoints");
  add_common(train);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint over the alpha/beta grid");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  auto* predict = app.add_subcommand("predict", "emit a timeline for one video");
  add_common(predict);
  predict->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  predict->add_option("--video", video_id, "video id")->required();
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  add_common(gradcheck);
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
  add_common(synth);
  synth->add_option("--out-data", synth_out, "dataset output directory");
  auto* sweep = app.add_subcommand("sweep", "train/eval over one hyperparameter axis");
  add_common(sweep);
  sweep->add_option("--axis", axis, "N|d_c|L_MA")->required();
  sweep->add_option("--values", sweep_values, "axis values")->required();
  auto* params = app.add_subcommand("params", "print learnable/frozen parameter counts");
  add_common(params);

  CLI11_PARSE(app, argc, argv);

  try {
    lta::apply_preset(cfg, preset.empty() ? "synthetic" : preset);
    if (!config_file.empty()) lta::load_config_file(cfg, config_file);
    if (!alphas_csv.empty()) cfg.alphas = lta::detail::parse_double_list(alphas_csv);
    if (!betas_csv.empty()) cfg.betas = lta::detail::parse_double_list(betas_csv);
    if (queries) cfg.model.num_queries = *queries;
    if (cmib_dim) cfg.model.cmib_dim = *cmib_dim;
    if (tune_dim) cfg.model.tune_mid = *tune_dim;
    if (noise_p) cfg.noise_p = *noise_p;
    if (seed) cfg.model.seed = *seed;
    if (epochs) cfg.epochs = *epochs;
    if (lr) cfg.lr = *lr;
    cfg.loss_mean |= loss_mean;
    cfg.freeze_audit |= freeze_audit;
    cfg.model.shared_projections |= shared_projections;
    cfg.model.shared_past_head |= shared_past_head;
    cfg.model.tuning_residual |= tuning_residual;
    cfg.model.disable_text |= disable_text;

    if (train->parsed()) return cmd_train(cfg);
    if (eval->parsed()) return cmd_eval(cfg, checkpoint);
    if (predict->parsed()) return cmd_predict(cfg, checkpoint, video_id);
    if (gradcheck->parsed()) return cmd_gradcheck(cfg);
    if (synth->parsed()) return cmd_synth(cfg, synth_out);
    if (sweep->parsed()) return cmd_sweep(cfg, axis, sweep_values);
    if (params->parsed()) return cmd_params(cfg);
  } catch (const lta::IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return 2;
  } catch (const lta::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
