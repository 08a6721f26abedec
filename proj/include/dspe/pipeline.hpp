#pragma once

// File-level orchestration shared by the command-line tool and the tests:
// loading datasets named in a config, report CSVs, and fused retrieval.

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dspe/checkpoint.hpp"
#include "dspe/config.hpp"
#include "dspe/data.hpp"
#include "dspe/error.hpp"
#include "dspe/eval.hpp"
#include "dspe/hard_negatives.hpp"
#include "dspe/localization.hpp"
#include "dspe/network.hpp"
#include "dspe/synthetic.hpp"
#include "dspe/trainer.hpp"

namespace dspe {

/// Dataset from `<prefix>_x`, `<prefix>_y`, `<prefix>_pairs`.
inline Dataset load_retrieval_dataset(const ExperimentConfig& cfg, const std::string& prefix) {
  return Dataset::from_pairs(load_feature_file(cfg.path(prefix + "_x")),
                             load_feature_file(cfg.path(prefix + "_y")),
                             read_pair_file(cfg.path(prefix + "_pairs")), cfg.graph());
}

inline LocalizationCorpus load_localization_corpus(const ExperimentConfig& cfg) {
  return load_corpus(cfg.path("boxes"), cfg.path("regions"), cfg.path("phrases"));
}

/// A checkpoint's input widths must match the feature files it is applied to.
inline void require_input_dims(const NetworkParams& p, std::size_t dim_x, std::size_t dim_y) {
  if (p.spec_x.input_dim != dim_x || p.spec_y.input_dim != dim_y) {
    throw FormatError("checkpoint expects input widths " + std::to_string(p.spec_x.input_dim) +
                      "/" + std::to_string(p.spec_y.input_dim) + " but the features have " +
                      std::to_string(dim_x) + "/" + std::to_string(dim_y));
  }
}

// ------------------------------------------------------------ report CSVs

inline std::string retrieval_csv(const std::string& echo, const RetrievalReport& r) {
  std::string out = comment_block(echo) + "metric,direction,k,value\n";
  for (std::size_t i = 0; i < 3; ++i)
    out += "recall,image_to_sentence," + std::to_string(kRecallKs[i]) + "," +
           format_double(r.image_to_sentence[i]) + "\n";
  for (std::size_t i = 0; i < 3; ++i)
    out += "recall,sentence_to_image," + std::to_string(kRecallKs[i]) + "," +
           format_double(r.sentence_to_image[i]) + "\n";
  return out;
}

struct LocalizationReport {
  double recall[3] = {0, 0, 0};
  PhraseMapReport map;
};

inline LocalizationReport evaluate_localization(const NetworkParams& model,
                                                const LocalizationCorpus& corpus,
                                                double nms_threshold) {
  require_input_dims(model, corpus.regions.dim(), corpus.phrases.dim());
  const auto d = corpus_distances(model, corpus);
  LocalizationReport r;
  for (std::size_t i = 0; i < 3; ++i) r.recall[i] = localization_recall_at_k(corpus, d, kRecallKs[i]);
  r.map = phrase_map(corpus, d, nms_threshold);
  return r;
}

inline std::string localization_csv(const std::string& echo, const LocalizationReport& r) {
  std::string out = comment_block(echo) + "metric,direction,k,value\n";
  for (std::size_t i = 0; i < 3; ++i)
    out += "recall,phrase_to_region," + std::to_string(kRecallKs[i]) + "," +
           format_double(r.recall[i]) + "\n";
  out += "map,phrase_to_region,,"+ format_double(r.map.map) + "\n";
  for (const auto& [phrase, ap] : r.map.ap) out += "ap," + phrase + ",," + format_double(ap) + "\n";
  for (const auto& phrase : r.map.excluded) out += "excluded," + phrase + ",,\n";
  return out;
}

// ------------------------------------------------------------ fusion

/// Raw feature rows grouped per image (regions) and per sentence (phrases),
/// aligned with the image and sentence order of a retrieval dataset.
struct FusionInputs {
  std::vector<Matrix> regions_per_image;
  std::vector<Matrix> phrases_per_sentence;
};

/// Regions come from P records (image id + feature row); phrases from
/// (sentence id, phrase id) pairs. Every image needs at least one region.
inline FusionInputs group_fusion_inputs(const Dataset& data, const std::vector<BoxRecord>& boxes,
                                        const FeatureSet& regions, const FeatureSet& phrases,
                                        const std::vector<IdPair>& sentence_phrases) {
  const auto xi = data.x.index();
  const auto yi = data.y.index();
  const auto pi = phrases.index();
  std::vector<std::vector<std::size_t>> reg(data.x.size()), phr(data.y.size());
  for (const auto& b : boxes) {
    if (b.kind != 'P') continue;
    auto it = xi.find(b.image_id);
    if (it == xi.end()) continue;  // regions of images outside this split
    if (!b.feature_row || *b.feature_row >= regions.size())
      throw ConsistencyError("region box of image '" + b.image_id + "' lacks a valid feature row");
    reg[it->second].push_back(*b.feature_row);
  }
  for (const auto& [s, p] : sentence_phrases) {
    auto si = yi.find(s);
    if (si == yi.end()) continue;
    auto pit = pi.find(p);
    if (pit == pi.end()) throw ConsistencyError("unknown phrase '" + p + "'");
    phr[si->second].push_back(pit->second);
  }
  FusionInputs f;
  for (std::size_t i = 0; i < reg.size(); ++i) {
    if (reg[i].empty()) throw EvaluationError("image '" + data.x.ids[i] + "' has no regions");
    f.regions_per_image.push_back(select_rows(regions.features, reg[i]));
  }
  for (const auto& rows : phr) f.phrases_per_sentence.push_back(select_rows(phrases.features, rows));
  return f;
}

/// Region-phrase distances under `rp_model` for every (image, sentence).
inline std::vector<std::vector<std::optional<double>>> rp_distances(const NetworkParams& rp_model,
                                                                     const FusionInputs& in) {
  std::vector<Matrix> regions, phrases;
  regions.reserve(in.regions_per_image.size());
  for (const Matrix& r : in.regions_per_image) regions.push_back(embed(rp_model, Branch::x, r));
  for (const Matrix& p : in.phrases_per_sentence)
    phrases.push_back(p.rows() ? embed(rp_model, Branch::y, p) : Matrix(0, rp_model.spec_y.embed_dim));
  return region_phrase_matrix(regions, phrases);
}

// ------------------------------------------------------------ synthetic files

struct SyntheticFiles {
  std::vector<std::filesystem::path> written;
};

inline void write_feature_set(const std::filesystem::path& path, const FeatureSet& fs,
                              SyntheticFiles& out) {
  write_feature_file(path, fs);
  out.written.push_back(path);
  out.written.push_back(ids_path_for(path));
}

/// Retrieval split files plus region/phrase annotations for fusion.
inline SyntheticFiles write_synthetic_retrieval(const ExperimentConfig& cfg,
                                                const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::uint64_t seed = cfg.u64("seed");
  const SyntheticWorld world(cfg.count("synth_dim_x"), cfg.count("synth_dim_y"), kDefaultLatentDim,
                             seed);
  const double noise = cfg.real("synth_noise");
  const RetrievalData train = world.generate(cfg.count("synth_clusters"),
                                             cfg.count("synth_images_per_cluster"),
                                             cfg.count("synth_sents_per_image"), noise,
                                             seed + 1, "train_");
  const RetrievalData test = world.generate(cfg.count("synth_heldout_clusters"),
                                            cfg.count("synth_images_per_cluster"),
                                            cfg.count("synth_sents_per_image"), noise,
                                            seed + 2, "test_");
  SyntheticFiles f;
  for (const auto& [name, d] : {std::pair{"train", &train}, std::pair{"test", &test}}) {
    const std::string n = name;
    write_feature_set(dir / (n + "_x.dspf"), d->images, f);
    write_feature_set(dir / (n + "_y.dspf"), d->sentences, f);
    write_pair_file(dir / (n + "_pairs.tsv"), d->pairs);
    f.written.push_back(dir / (n + "_pairs.tsv"));
    const RegionPhraseData a = world.annotate(*d, cfg.count("synth_regions_per_image"),
                                              cfg.count("synth_phrases_per_sentence"), noise,
                                              seed + (n == "train" ? 3 : 4), n + "_");
    write_feature_set(dir / (n + "_regions.dspf"), a.regions, f);
    write_feature_set(dir / (n + "_phrases.dspf"), a.phrases, f);
    write_box_file(dir / (n + "_region_boxes.tsv"), a.boxes);
    write_pair_file(dir / (n + "_sentence_phrases.tsv"), a.sentence_phrases);
    f.written.push_back(dir / (n + "_region_boxes.tsv"));
    f.written.push_back(dir / (n + "_sentence_phrases.tsv"));
    // region-phrase training pairs: the cluster region of each image with
    // every phrase of its sentences
    std::vector<IdPair> rp;
    const std::size_t rpi = cfg.count("synth_regions_per_image");
    const std::size_t pps = cfg.count("synth_phrases_per_sentence");
    for (std::size_t j = 0; j < d->sentences.size(); ++j) {
      const std::size_t img = j / cfg.count("synth_sents_per_image");
      for (std::size_t p = 0; p < pps; ++p)
        rp.emplace_back(a.regions.ids[img * rpi], a.phrases.ids[j * pps + p]);
    }
    write_pair_file(dir / (n + "_rp_pairs.tsv"), rp);
    f.written.push_back(dir / (n + "_rp_pairs.tsv"));
  }
  return f;
}

/// Localization train/test corpora sharing one world and one phrase file.
inline SyntheticFiles write_synthetic_localization(const ExperimentConfig& cfg,
                                                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::uint64_t seed = cfg.u64("seed");
  LocalizationSynthConfig lc;
  lc.num_phrases = cfg.count("synth_phrases");
  lc.feat_dim_x = cfg.count("synth_dim_x");
  lc.feat_dim_y = cfg.count("synth_dim_y");
  const LocalizationWorld world(lc, seed);
  SyntheticFiles f;
  write_feature_set(dir / "phrases.dspf", world.phrases(), f);
  for (const auto& [name, s] : {std::pair{"train", seed + 1}, std::pair{"test", seed + 2}}) {
    const std::string n = name;
    const auto sample = world.generate(cfg.count("synth_images"), s, n + "_");
    write_feature_set(dir / (n + "_regions.dspf"), sample.corpus.regions, f);
    write_box_file(dir / (n + "_boxes.tsv"), sample.records);
    f.written.push_back(dir / (n + "_boxes.tsv"));
  }
  return f;
}

}  // namespace dspe
