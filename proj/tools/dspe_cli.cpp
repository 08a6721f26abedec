// Command-line driver: training, evaluation, mining, fusion, synthetic data
// and the gradient-check suite. Logs go to stderr, results to files.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "dspe/checkpoint.hpp"
#include "dspe/config.hpp"
#include "dspe/gradcheck.hpp"
#include "dspe/hard_negatives.hpp"
#include "dspe/pipeline.hpp"

namespace {

using namespace dspe;

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

void log(const std::string& msg) { std::cerr << "[dspe] " << msg << "\n"; }

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

int cmd_train(const ExperimentConfig& cfg) {
  const std::filesystem::path ckpt = cfg.path("checkpoint");
  const bool localization = cfg.text("train_x").empty() && !cfg.text("boxes").empty();
  Dataset data = localization ? localization_dataset(load_localization_corpus(cfg), cfg.graph())
                              : load_retrieval_dataset(cfg, "train");
  log("training set: " + std::to_string(data.x.size()) + " x rows, " +
      std::to_string(data.y.size()) + " y rows, " + std::to_string(data.graph.pairs().size()) +
      " pairs");

  NetworkParams params;
  if (!cfg.text("init_checkpoint").empty()) {
    params = load_checkpoint(cfg.path("init_checkpoint")).params;
    require_input_dims(params, data.x.dim(), data.y.dim());
  } else {
    params = init_params(cfg.branch_x(data.x.dim()), cfg.branch_y(data.y.dim()), cfg.u64("seed"));
  }

  std::vector<EpochStats> stats;
  OptimizerState opt;
  if (!cfg.text("hard_negatives").empty()) {
    const HardNegativeSet negs = read_hard_negatives(cfg.path("hard_negatives"));
    const TrainConfig tc = cfg.finetune();
    log("fine-tuning with " + std::to_string(negs.total()) + " hard negatives for " +
        std::to_string(tc.epochs) + " epochs");
    stats = fine_tune(params, data, negs, tc, &std::cerr);
    opt = make_optimizer(params, tc.sgd);
    opt.begin_epoch(tc.epochs - 1);
  } else {
    const TrainConfig tc = cfg.train();
    opt = make_optimizer(params, tc.sgd);
    double best = std::numeric_limits<double>::infinity();
    std::filesystem::path best_path = ckpt;
    best_path += ".best";
    stats = train(params, opt, data, tc, nullptr, [&](const EpochStats& s, const NetworkParams& p) {
      log("epoch " + std::to_string(s.epoch + 1) + " lr " + format_double(s.lr) + " loss " +
          format_double(s.mean_loss));
      if (s.batches > 0 && s.mean_loss < best) {
        best = s.mean_loss;
        save_checkpoint(p, opt, best_path);
      }
    });
  }
  save_checkpoint(params, opt, ckpt);
  log("wrote " + ckpt.string());
  if (!cfg.text("output").empty()) {
    write_text(cfg.path("output"), metrics_csv(cfg.echo(), stats));
    log("wrote " + cfg.text("output"));
  }
  return kExitOk;
}

void write_report(const ExperimentConfig& cfg, const std::string& csv) {
  if (cfg.text("output").empty()) return;
  write_text(cfg.path("output"), csv);
  log("wrote " + cfg.text("output"));
}

int cmd_eval_retrieval(const ExperimentConfig& cfg) {
  const NetworkParams params = load_checkpoint(cfg.path("checkpoint")).params;
  const Dataset data = load_retrieval_dataset(cfg, "eval");
  require_input_dims(params, data.x.dim(), data.y.dim());
  const RetrievalReport r = retrieval_report(
      embedded_distances(params, data.x.features, data.y.features, cfg.threads()), data.graph);
  log("image->sentence R@1/5/10 " + percent(r.image_to_sentence[0]) + " " +
      percent(r.image_to_sentence[1]) + " " + percent(r.image_to_sentence[2]));
  log("sentence->image R@1/5/10 " + percent(r.sentence_to_image[0]) + " " +
      percent(r.sentence_to_image[1]) + " " + percent(r.sentence_to_image[2]));
  write_report(cfg, retrieval_csv(cfg.echo(), r));
  return kExitOk;
}

int cmd_eval_localization(const ExperimentConfig& cfg) {
  const NetworkParams params = load_checkpoint(cfg.path("checkpoint")).params;
  const LocalizationCorpus corpus = load_localization_corpus(cfg);
  const LocalizationReport r = evaluate_localization(params, corpus, cfg.nms_threshold());
  log("localization R@1/5/10 " + percent(r.recall[0]) + " " + percent(r.recall[1]) + " " +
      percent(r.recall[2]) + ", mAP " + format_double(r.map.map));
  for (const auto& p : r.map.excluded) log("phrase without ground truth excluded: " + p);
  write_report(cfg, localization_csv(cfg.echo(), r));
  return kExitOk;
}

int cmd_mine_negatives(const ExperimentConfig& cfg) {
  const NetworkParams params = load_checkpoint(cfg.path("checkpoint")).params;
  const LocalizationCorpus corpus = load_localization_corpus(cfg);
  require_input_dims(params, corpus.regions.dim(), corpus.phrases.dim());
  const HardNegativeSet set = mine_hard_negatives(params, corpus, cfg.count("hard_negative_cap"));
  for (const auto& p : set.skipped) log("phrase without ground-truth features skipped: " + p);
  log("mined " + std::to_string(set.total()) + " hard negatives for " +
      std::to_string(set.by_phrase.size()) + " phrases");
  write_hard_negatives(cfg.path("hard_negatives"), set);
  return kExitOk;
}

int cmd_fuse(const ExperimentConfig& cfg) {
  const NetworkParams global = load_checkpoint(cfg.path("checkpoint")).params;
  const NetworkParams rp = load_checkpoint(cfg.path("rp_checkpoint")).params;
  const Dataset data = load_retrieval_dataset(cfg, "eval");
  require_input_dims(global, data.x.dim(), data.y.dim());
  const FeatureSet regions = load_feature_file(cfg.path("regions"));
  const FeatureSet phrases = load_feature_file(cfg.path("phrases"));
  require_input_dims(rp, regions.dim(), phrases.dim());
  const FusionInputs in = group_fusion_inputs(data, read_box_file(cfg.path("boxes")), regions,
                                              phrases, read_pair_file(cfg.path("sentence_phrases")));
  const Matrix d_global =
      embedded_distances(global, data.x.features, data.y.features, cfg.threads());
  const Matrix fused = fuse_distances(d_global, rp_distances(rp, in), cfg.alpha());
  const RetrievalReport r = retrieval_report(fused, data.graph);
  log("fused (alpha " + cfg.text("alpha") + ") image->sentence R@1 " +
      percent(r.image_to_sentence[0]) + ", sentence->image R@1 " + percent(r.sentence_to_image[0]));
  write_report(cfg, retrieval_csv(cfg.echo(), r));
  return kExitOk;
}

int cmd_gen_synthetic(const ExperimentConfig& cfg) {
  const std::filesystem::path dir = cfg.path("output");
  const SyntheticFiles f = cfg.text("synth_kind") == "localization"
                               ? write_synthetic_localization(cfg, dir)
                               : write_synthetic_retrieval(cfg, dir);
  for (const auto& p : f.written) log("wrote " + p.string());
  return kExitOk;
}

int cmd_grad_check(const ExperimentConfig& cfg) {
  const auto results = run_gradient_suite(cfg.u64("seed"), cfg.count("gradcheck_seeds"));
  bool ok = true;
  std::string csv = comment_block(cfg.echo()) + "check,seed,max_rel_error,entries,passed\n";
  std::map<std::string, double> worst;
  for (const auto& r : results) {
    ok = ok && r.passed;
    worst[r.name] = std::max(worst[r.name], r.max_rel_error);
    csv += r.name + "," + std::to_string(r.seed) + "," + format_double(r.max_rel_error) + "," +
           std::to_string(r.entries) + "," + (r.passed ? "1" : "0") + "\n";
    if (!r.passed)
      log("FAILED " + r.name + " seed " + std::to_string(r.seed) + " max rel. error " +
          format_double(r.max_rel_error));
  }
  for (const auto& [name, err] : worst) log(name + ": worst relative error " + format_double(err));
  if (!cfg.text("output").empty()) write_text(cfg.path("output"), csv);
  log(ok ? "all gradient checks passed" : "gradient checks failed");
  return ok ? kExitOk : kExitValidation;
}

struct Command {
  const char* name;
  const char* help;
  std::function<int(const ExperimentConfig&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  const Command commands[] = {
      {"train", "train an embedding model (or fine-tune with hard negatives)", cmd_train},
      {"eval-retrieval", "bidirectional Recall@K of a checkpoint", cmd_eval_retrieval},
      {"eval-localization", "phrase localization Recall@K and mAP", cmd_eval_localization},
      {"mine-negatives", "mine hard-negative regions per phrase", cmd_mine_negatives},
      {"fuse", "retrieval under the weighted global/region-phrase distance", cmd_fuse},
      {"gen-synthetic", "write a synthetic dataset", cmd_gen_synthetic},
      {"grad-check", "finite-difference gradient suite", cmd_grad_check},
  };

  CLI::App app{"Two-branch structure-preserving image-text embeddings"};
  app.require_subcommand(1);
  std::map<std::string, std::map<std::string, std::string>> flags;
  std::map<std::string, std::string> config_files;
  std::map<std::string, CLI::App*> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    subs[c.name] = sub;
    sub->add_option("--config", config_files[c.name], "key = value configuration file");
    for (const auto& k : kConfigKeys) {
      const std::string key(k.name);
      sub->add_option("--" + key, flags[c.name][key], std::string(k.help));
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  for (const auto& c : commands) {
    CLI::App* sub = subs[c.name];
    if (!sub->parsed()) continue;
    try {
      ExperimentConfig cfg;
      if (!config_files[c.name].empty()) cfg.merge_file(config_files[c.name]);
      for (const auto& k : kConfigKeys) {
        const std::string key(k.name);
        if (sub->get_option("--" + key)->count() > 0) cfg.set(key, flags[c.name][key]);
      }
      cfg.validate();
      return c.run(cfg);
    } catch (const ConfigError& e) {
      log(std::string("configuration error: ") + e.what());
      return kExitValidation;
    } catch (const FormatError& e) {
      log(std::string("format error: ") + e.what());
      return kExitValidation;
    } catch (const ConsistencyError& e) {
      log(std::string("consistency error: ") + e.what());
      return kExitValidation;
    } catch (const DimensionError& e) {
      log(std::string("dimension error: ") + e.what());
      return kExitValidation;
    } catch (const std::exception& e) {
      log(std::string("error: ") + e.what());
      return kExitRuntime;
    }
  }
  return kExitRuntime;
}
