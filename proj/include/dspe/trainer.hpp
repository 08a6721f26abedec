#pragma once

// Mini-batch training loop: sample, embed, mine, hinge loss, SGD step.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "dspe/data.hpp"
#include "dspe/error.hpp"
#include "dspe/loss.hpp"
#include "dspe/network.hpp"
#include "dspe/optimizer.hpp"
#include "dspe/random.hpp"

namespace dspe {

/// Both views plus their correspondence graph.
struct Dataset {
  FeatureSet x;
  FeatureSet y;
  CorrespondenceGraph graph;

  static Dataset from_pairs(FeatureSet x, FeatureSet y, const std::vector<IdPair>& pairs,
                            const GraphOptions& opt = {}) {
    x.validate();
    y.validate();
    CorrespondenceGraph g = build_graph(x.ids, y.ids, pairs, opt);
    return {std::move(x), std::move(y), std::move(g)};
  }
};

/// How a batch's hinge sum becomes the training objective.
enum class LossNormalization {
  sum,       // the plain weighted sum
  pair_mean  // divided by the number of positive (x, y) pairs in the batch
};

inline const char* normalization_name(LossNormalization n) {
  return n == LossNormalization::sum ? "sum" : "pair_mean";
}

inline LossNormalization parse_normalization(const std::string& s) {
  if (s == "sum") return LossNormalization::sum;
  if (s == "pair_mean") return LossNormalization::pair_mean;
  throw ConfigError("loss normalization must be 'sum' or 'pair_mean', got '" + s + "'");
}

struct TrainConfig {
  LossConfig loss;
  LossNormalization normalization = LossNormalization::pair_mean;
  SgdConfig sgd;
  std::size_t epochs = 30;
  std::size_t batch_pairs = 64;
  bool augment = true;
  std::uint64_t seed = 1;  // batching and dropout stream

  void validate() const {
    loss.validate();
    sgd.validate();
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_pairs < 1) throw ConfigError("batch size must be >= 1");
  }
};

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;  // mean batch objective over the batches that were used
  std::array<std::size_t, 4> triplets{};
  std::size_t batches = 0;
  std::size_t skipped = 0;  // batches with fewer than 2 rows in a view
};

/// Result of one optimization step on one batch.
struct StepResult {
  LossTerms terms;     // raw hinge sums
  double objective = 0.0;  // after normalization
  TripletSet triplets;
};

inline std::size_t count_positive_pairs(const BatchStructure& s) {
  std::size_t n = 0;
  for (std::size_t x = 0; x < s.num_x(); ++x)
    for (std::size_t y = 0; y < s.num_y(); ++y) n += s.positive(x, y);
  return n;
}

/// Forward both branches in train mode on the batch rows, mine, step.
inline StepResult train_step(NetworkParams& params, OptimizerState& opt, const Dataset& data,
                             const CorrespondenceGraph& graph, const MiniBatch& batch,
                             const LossConfig& loss, LossNormalization norm, Rng& rng) {
  const Matrix in_x = select_rows(data.x.features, batch.x_rows);
  const Matrix in_y = select_rows(data.y.features, batch.y_rows);
  auto fx = forward_branch(params, Branch::x, in_x, Mode::train, rng);
  auto fy = forward_branch(params, Branch::y, in_y, Mode::train, rng);
  const BatchStructure s = batch_structure(graph, batch);
  StepResult r;
  r.triplets = mine_triplets(fx.output, fy.output, s, loss);
  LossResult l = hinge_loss(fx.output, fy.output, r.triplets, loss);
  double scale = 1.0;
  if (norm == LossNormalization::pair_mean)
    scale = 1.0 / static_cast<double>(std::max<std::size_t>(1, count_positive_pairs(s)));
  if (scale != 1.0) {
    for (double& v : l.grad_x.values()) v *= scale;
    for (double& v : l.grad_y.values()) v *= scale;
  }
  backward_and_step(params, opt, fx.tape, fy.tape, l.grad_x, l.grad_y);
  r.terms = l.terms;
  r.objective = l.terms.total * scale;
  return r;
}

/// One pass over disjoint shuffled batches covering every pair once.
inline EpochStats train_epoch(NetworkParams& params, OptimizerState& opt, const Dataset& data,
                              const TrainConfig& cfg, std::size_t epoch, Rng& rng,
                              const HardNegativePool* pool = nullptr) {
  opt.begin_epoch(epoch);
  EpochStats st;
  st.epoch = epoch;
  st.lr = opt.lr;
  const std::size_t n = data.graph.pairs().size();
  const std::size_t bp = std::min(cfg.batch_pairs, n);
  double loss_sum = 0.0;
  for (auto& idx : epoch_partition(n, bp, rng)) {
    MiniBatch b = assemble_batch(data.graph, std::move(idx), cfg.augment, rng);
    if (pool) attach_hard_negatives(b, data.graph, *pool);
    if (b.x_rows.size() < 2 || b.y_rows.size() < 2) {
      ++st.skipped;
      continue;
    }
    StepResult r =
        train_step(params, opt, data, data.graph, b, cfg.loss, cfg.normalization, rng);
    loss_sum += r.objective;
    for (std::size_t f = 0; f < 4; ++f) st.triplets[f] += r.triplets.families[f].size();
    ++st.batches;
  }
  st.mean_loss = st.batches ? loss_sum / static_cast<double>(st.batches) : 0.0;
  return st;
}

using EpochCallback = std::function<void(const EpochStats&, const NetworkParams&)>;

/// Runs cfg.epochs epochs; the schedule starts at epoch 0.
inline std::vector<EpochStats> train(NetworkParams& params, OptimizerState& opt,
                                     const Dataset& data, const TrainConfig& cfg,
                                     const HardNegativePool* pool = nullptr,
                                     const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.graph.pairs().empty()) throw ConfigError("training set has no pairs");
  Rng rng(cfg.seed);
  std::vector<EpochStats> out;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    out.push_back(train_epoch(params, opt, data, cfg, e, rng, pool));
    if (on_epoch) on_epoch(out.back(), params);
  }
  return out;
}

/// Mean distance between distinct same-meaning sentences (y, y' in N(y)),
/// in eval-mode embeddings. 0 when no sentence has a neighbor.
inline double mean_neighborhood_distance_y(const NetworkParams& params, const Dataset& data) {
  const Matrix e = embed(params, Branch::y, data.y.features);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t a = 0; a < data.graph.num_y(); ++a) {
    for (std::size_t b : data.graph.neighbors_y(a)) {
      if (b == a) continue;
      double s = 0.0;
      for (std::size_t k = 0; k < e.cols(); ++k) {
        const double d = e(a, k) - e(b, k);
        s += d * d;
      }
      sum += std::sqrt(s);
      ++count;
    }
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

// ------------------------------------------------------------ metrics CSV

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

/// Prefixes every line of `echo` with "# ".
inline std::string comment_block(const std::string& echo) {
  std::string out;
  std::istringstream in(echo);
  for (std::string line; std::getline(in, line);) out += "# " + line + "\n";
  return out;
}

inline std::string metrics_csv(const std::string& echo, const std::vector<EpochStats>& stats) {
  std::string out = comment_block(echo);
  out += "epoch,lr,mean_loss,triplets_image_to_sentence,triplets_sentence_to_image,"
         "triplets_image_structure,triplets_sentence_structure,batches,skipped\n";
  for (const auto& s : stats) {
    out += std::to_string(s.epoch + 1) + "," + format_double(s.lr) + "," +
           format_double(s.mean_loss);
    for (std::size_t t : s.triplets) out += "," + std::to_string(t);
    out += "," + std::to_string(s.batches) + "," + std::to_string(s.skipped) + "\n";
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace dspe
