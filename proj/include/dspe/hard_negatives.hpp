#pragma once

// Hard-negative mining for region-phrase models and the ranking-only
// fine-tuning pass that consumes the mined regions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "dspe/box.hpp"
#include "dspe/data.hpp"
#include "dspe/error.hpp"
#include "dspe/eval.hpp"
#include "dspe/localization.hpp"
#include "dspe/network.hpp"
#include "dspe/trainer.hpp"

namespace dspe {

inline constexpr std::size_t kHardNegativeCap = 50;
inline constexpr double kHardNegativeIou = 0.5;

struct HardNegative {
  std::size_t region_row = 0;
  double distance = 0.0;

  bool operator==(const HardNegative&) const = default;
};

struct HardNegativeSet {
  std::map<std::string, std::vector<HardNegative>> by_phrase;  // closest first
  std::vector<std::string> skipped;                           // phrases without GT features

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& [p, v] : by_phrase) n += v.size();
    return n;
  }

  bool operator==(const HardNegativeSet&) const = default;
};

/// A region is a hard negative for a phrase when it is strictly closer to the
/// phrase than the phrase's closest ground-truth region and overlaps every
/// ground-truth box of the phrase in its image with IoU < 0.5. The `cap`
/// closest (ties by row) are kept per phrase.
inline HardNegativeSet mine_hard_negatives(const NetworkParams& model,
                                           const LocalizationCorpus& corpus,
                                           std::size_t cap = kHardNegativeCap) {
  const Matrix regions = embed(model, Branch::x, corpus.regions.features);
  const Matrix phrases = embed(model, Branch::y, corpus.phrases.features);
  auto dist = [&](std::size_t p, std::size_t r) {
    double s = 0.0;
    for (std::size_t k = 0; k < regions.cols(); ++k) {
      const double d = phrases(p, k) - regions(r, k);
      s += d * d;
    }
    return std::sqrt(s);
  };

  std::map<std::string, std::vector<std::size_t>> queries_of;
  for (std::size_t qi = 0; qi < corpus.queries.size(); ++qi)
    queries_of[corpus.queries[qi].phrase_id].push_back(qi);

  HardNegativeSet out;
  for (const auto& [phrase, qs] : queries_of) {
    const std::size_t prow = corpus.queries[qs.front()].phrase_row;
    double min_gt = std::numeric_limits<double>::infinity();
    for (std::size_t qi : qs)
      for (std::size_t r : corpus.queries[qi].gt_rows) min_gt = std::min(min_gt, dist(prow, r));
    if (min_gt == std::numeric_limits<double>::infinity()) {
      out.skipped.push_back(phrase);
      continue;
    }
    std::vector<HardNegative> found;
    std::set<std::size_t> seen;
    for (std::size_t qi : qs) {
      const auto& q = corpus.queries[qi];
      for (std::size_t i = 0; i < q.proposals.size(); ++i) {
        const double d = dist(prow, q.proposal_rows[i]);
        if (!(d < min_gt)) continue;
        bool overlaps = false;
        for (const Box& g : q.gt)
          if (iou(q.proposals[i], g) >= kHardNegativeIou) overlaps = true;
        if (!overlaps && seen.insert(q.proposal_rows[i]).second) found.push_back({q.proposal_rows[i], d});
      }
    }
    std::sort(found.begin(), found.end(), [](const HardNegative& a, const HardNegative& b) {
      return a.distance != b.distance ? a.distance < b.distance : a.region_row < b.region_row;
    });
    if (found.size() > cap) found.resize(cap);
    if (!found.empty()) out.by_phrase.emplace(phrase, std::move(found));
  }
  return out;
}

/// TSV: phrase_id<TAB>region_row_index<TAB>distance
inline void write_hard_negatives(const std::filesystem::path& path, const HardNegativeSet& set) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write hard-negative file " + path.string());
  out.precision(17);
  for (const auto& [phrase, negs] : set.by_phrase)
    for (const auto& n : negs) out << phrase << '\t' << n.region_row << '\t' << n.distance << '\n';
}

inline HardNegativeSet read_hard_negatives(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open hard-negative file " + path.string());
  HardNegativeSet set;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    auto c = split_tabs(line);
    if (c.size() != 3) throw FormatError(where + ": expected 3 columns");
    set.by_phrase[c[0]].push_back(
        {detail::parse_index(c[1], where), detail::parse_double(c[2], where)});
  }
  return set;
}

/// Region-phrase training set of a corpus: GT regions paired with phrases.
/// Every region row of the corpus is present so mined rows stay addressable.
inline Dataset localization_dataset(const LocalizationCorpus& corpus, const GraphOptions& opt = {}) {
  return Dataset::from_pairs(corpus.regions, corpus.phrases, corpus.training_pairs(), opt);
}

/// Maps a HardNegativeSet onto graph indices (phrase -> region rows).
inline HardNegativePool to_pool(const HardNegativeSet& set, const Dataset& data) {
  const auto yi = data.y.index();
  HardNegativePool pool;
  for (const auto& [phrase, negs] : set.by_phrase) {
    auto it = yi.find(phrase);
    if (it == yi.end()) throw ConsistencyError("hard negatives for unknown phrase '" + phrase + "'");
    auto& rows = pool[it->second];
    for (const auto& n : negs) {
      if (n.region_row >= data.x.size())
        throw ConsistencyError("hard negative region row " + std::to_string(n.region_row) +
                               " out of range");
      rows.push_back(n.region_row);
    }
  }
  return pool;
}

inline constexpr std::size_t kFineTuneEpochs = 5;

/// Ranking-only continued training with the mined regions as extra
/// sentence_to_image negatives of their own phrase. The structure weights are
/// forced to zero and the learning-rate schedule restarts from cfg.sgd.lr0.
inline std::vector<EpochStats> fine_tune(NetworkParams& model, const Dataset& data,
                                         const HardNegativeSet& negatives, TrainConfig cfg,
                                         std::ostream* log = &std::cerr) {
  if (cfg.loss.lambda2 != 0.0 || cfg.loss.lambda3 != 0.0) {
    if (log)
      *log << "warning: fine-tuning uses ranking constraints only; lambda2 and lambda3 set to 0\n";
    cfg.loss.lambda2 = 0.0;
    cfg.loss.lambda3 = 0.0;
  }
  const HardNegativePool pool = to_pool(negatives, data);
  OptimizerState opt = make_optimizer(model, cfg.sgd);
  return train(model, opt, data, cfg, pool.empty() ? nullptr : &pool);
}

}  // namespace dspe
