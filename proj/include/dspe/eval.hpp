#pragma once

// Retrieval and phrase-localization metrics, plus weighted-distance fusion.

#include <algorithm>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dspe/box.hpp"
#include "dspe/data.hpp"
#include "dspe/error.hpp"
#include "dspe/layers.hpp"
#include "dspe/localization.hpp"
#include "dspe/matrix.hpp"
#include "dspe/network.hpp"

namespace dspe {

// ------------------------------------------------------------ retrieval

/// Percentage of queries (rows) whose k nearest candidates contain a
/// positive. Candidates are ranked by ascending distance, ties by index.
inline double recall_at_k(const Matrix& distances,
                          const std::vector<std::vector<std::size_t>>& positives, std::size_t k) {
  if (k < 1) throw ConfigError("recall@k needs k >= 1");
  if (positives.size() != distances.rows())
    throw DimensionError("recall@k: one positive set per query required");
  if (distances.rows() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < distances.rows(); ++q) {
    const auto& pos = positives[q];
    if (pos.empty()) throw EvaluationError("recall@k: query " + std::to_string(q) + " has no positive");
    auto row = distances.row(q);
    // best-ranked positive under (distance, index) order
    std::size_t best = pos.front();
    for (std::size_t p : pos) {
      if (p >= row.size()) throw DimensionError("recall@k: positive index out of range");
      if (row[p] < row[best] || (row[p] == row[best] && p < best)) best = p;
    }
    std::size_t ahead = 0;
    for (std::size_t c = 0; c < row.size() && ahead < k; ++c)
      if (row[c] < row[best] || (row[c] == row[best] && c < best)) ++ahead;
    if (ahead < k) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(distances.rows());
}

inline constexpr std::size_t kRecallKs[3] = {1, 5, 10};

struct RetrievalReport {
  double image_to_sentence[3] = {0, 0, 0};  // R@1, R@5, R@10
  double sentence_to_image[3] = {0, 0, 0};

  bool operator==(const RetrievalReport& o) const {
    return std::equal(std::begin(image_to_sentence), std::end(image_to_sentence),
                      std::begin(o.image_to_sentence)) &&
           std::equal(std::begin(sentence_to_image), std::end(sentence_to_image),
                      std::begin(o.sentence_to_image));
  }
};

/// Both retrieval directions from an image x sentence distance matrix.
inline RetrievalReport retrieval_report(const Matrix& image_sentence_dist,
                                        const CorrespondenceGraph& g) {
  if (image_sentence_dist.rows() != g.num_x() || image_sentence_dist.cols() != g.num_y())
    throw DimensionError("retrieval: distance matrix does not match the graph");
  std::vector<std::vector<std::size_t>> img_pos(g.num_x()), sent_pos(g.num_y());
  for (std::size_t x = 0; x < g.num_x(); ++x) img_pos[x] = g.partners_of_x(x);
  for (std::size_t y = 0; y < g.num_y(); ++y) sent_pos[y] = g.partners_of_y(y);
  const Matrix t = transpose(image_sentence_dist);
  RetrievalReport r;
  for (std::size_t i = 0; i < 3; ++i) {
    r.image_to_sentence[i] = recall_at_k(image_sentence_dist, img_pos, kRecallKs[i]);
    r.sentence_to_image[i] = recall_at_k(t, sent_pos, kRecallKs[i]);
  }
  return r;
}

/// Embeds both views in eval mode and returns the image x sentence distances.
inline Matrix embedded_distances(const NetworkParams& params, const Matrix& images,
                                 const Matrix& sentences, unsigned threads = 1) {
  return pairwise_distances(embed(params, Branch::x, images), embed(params, Branch::y, sentences),
                            threads);
}

// ------------------------------------------------------------ weighted distance

/// D = (1 - alpha) * d_global + alpha * d_rp.
inline double weighted_distance(double d_global, double d_rp, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ConfigError("alpha must lie in [0, 1], got " + std::to_string(alpha));
  return (1.0 - alpha) * d_global + alpha * d_rp;
}

/// Mean over phrases (rows of `phrase_emb`) of the distance to the nearest
/// region (rows of `region_emb`). Empty when there are no phrases.
inline std::optional<double> region_phrase_distance(const Matrix& phrase_emb,
                                                    const Matrix& region_emb) {
  if (region_emb.rows() == 0) throw EvaluationError("image has no regions");
  if (phrase_emb.rows() == 0) return std::nullopt;
  const Matrix d = pairwise_distances(phrase_emb, region_emb);
  double sum = 0.0;
  for (std::size_t p = 0; p < d.rows(); ++p) {
    auto r = d.row(p);
    sum += *std::min_element(r.begin(), r.end());
  }
  return sum / static_cast<double>(d.rows());
}

/// Region-phrase distances for every (image, sentence) pair, given embedded
/// regions grouped per image and embedded phrases grouped per sentence.
/// Entries for sentences without phrases are empty.
inline std::vector<std::vector<std::optional<double>>> region_phrase_matrix(
    const std::vector<Matrix>& regions_per_image, const std::vector<Matrix>& phrases_per_sentence) {
  std::vector<std::vector<std::optional<double>>> out(regions_per_image.size());
  for (std::size_t i = 0; i < regions_per_image.size(); ++i) {
    out[i].reserve(phrases_per_sentence.size());
    for (const Matrix& ph : phrases_per_sentence)
      out[i].push_back(region_phrase_distance(ph, regions_per_image[i]));
  }
  return out;
}

/// Fused matrix; pairs without a region-phrase distance keep d_global.
inline Matrix fuse_distances(const Matrix& global,
                             const std::vector<std::vector<std::optional<double>>>& rp,
                             double alpha) {
  if (rp.size() != global.rows()) throw DimensionError("fuse: row count mismatch");
  Matrix out(global.rows(), global.cols());
  for (std::size_t i = 0; i < global.rows(); ++i) {
    if (rp[i].size() != global.cols()) throw DimensionError("fuse: column count mismatch");
    for (std::size_t j = 0; j < global.cols(); ++j) {
      out(i, j) = rp[i][j] ? weighted_distance(global(i, j), *rp[i][j], alpha) : global(i, j);
    }
  }
  return out;
}

// ------------------------------------------------------------ localization

/// Greedy non-maximum suppression. Boxes are visited best score first (ties
/// by index); a box is dropped when its IoU with an already kept box exceeds
/// overlap_thresh. Returns kept indices in visiting order.
inline std::vector<std::size_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                                    bool lower_is_better, double overlap_thresh) {
  if (boxes.size() != scores.size()) throw DimensionError("nms: one score per box required");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return lower_is_better ? scores[a] < scores[b] : scores[a] > scores[b];
  });
  std::vector<std::size_t> kept;
  for (std::size_t i : order) {
    bool keep = true;
    for (std::size_t k : kept) {
      if (iou(boxes[i], boxes[k]) > overlap_thresh) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(i);
  }
  return kept;
}

/// Mean of the precision values at each relevant position of a ranked list;
/// 0 when nothing is relevant.
inline double average_precision(const std::vector<bool>& relevant_in_rank_order) {
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < relevant_in_rank_order.size(); ++i) {
    if (!relevant_in_rank_order[i]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  return hits == 0 ? 0.0 : sum / static_cast<double>(hits);
}

inline constexpr double kLocalizationIou = 0.5;
inline constexpr double kDefaultNmsThreshold = 0.3;

/// Phrase-to-proposal distances for one query under a region-phrase model.
inline std::vector<double> query_distances(const NetworkParams& model,
                                           const LocalizationCorpus& corpus,
                                           const LocalizationQuery& q) {
  const Matrix phrase = select_rows(corpus.phrases.features, std::vector<std::size_t>{q.phrase_row});
  const Matrix regions = select_rows(corpus.regions.features, q.proposal_rows);
  const Matrix d = pairwise_distances(embed(model, Branch::y, phrase), embed(model, Branch::x, regions));
  return {d.row(0).begin(), d.row(0).end()};
}

/// Per-query distance lists for the whole corpus.
inline std::vector<std::vector<double>> corpus_distances(const NetworkParams& model,
                                                         const LocalizationCorpus& corpus) {
  const Matrix regions = embed(model, Branch::x, corpus.regions.features);
  const Matrix phrases = embed(model, Branch::y, corpus.phrases.features);
  std::vector<std::vector<double>> out;
  out.reserve(corpus.queries.size());
  for (const auto& q : corpus.queries) {
    const Matrix pr = select_rows(regions, q.proposal_rows);
    const Matrix ph = select_rows(phrases, std::vector<std::size_t>{q.phrase_row});
    const Matrix d = pairwise_distances(ph, pr);
    out.emplace_back(d.row(0).begin(), d.row(0).end());
  }
  return out;
}

/// A query is a hit when one of its k nearest proposals overlaps a ground
/// truth box of the phrase with IoU >= iou_thresh.
inline double localization_recall_at_k(const LocalizationCorpus& corpus,
                                       const std::vector<std::vector<double>>& distances,
                                       std::size_t k, double iou_thresh = kLocalizationIou) {
  if (k < 1) throw ConfigError("recall@k needs k >= 1");
  if (distances.size() != corpus.queries.size())
    throw DimensionError("localization recall: one distance list per query required");
  if (corpus.queries.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t qi = 0; qi < corpus.queries.size(); ++qi) {
    const auto& q = corpus.queries[qi];
    const auto& d = distances[qi];
    if (d.size() != q.proposals.size()) throw DimensionError("localization recall: proposal count");
    std::vector<std::size_t> order(d.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return d[a] < d[b]; });
    bool hit = false;
    for (std::size_t r = 0; r < std::min(k, order.size()) && !hit; ++r)
      for (const Box& g : q.gt)
        if (iou(q.proposals[order[r]], g) >= iou_thresh) hit = true;
    if (hit) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(corpus.queries.size());
}

struct PhraseMapReport {
  double map = 0.0;
  std::map<std::string, double> ap;       // per evaluated phrase
  std::vector<std::string> excluded;      // phrases without ground truth
};

/// Per unique phrase: pool the post-NMS proposals of every query of that
/// phrase, rank them by distance, mark a detection correct when an unused
/// ground-truth box in its image has IoU >= 0.5 (best IoU taken first), and
/// average the precision at each correct detection. mAP averages phrases.
inline PhraseMapReport phrase_map(const LocalizationCorpus& corpus,
                                  const std::vector<std::vector<double>>& distances,
                                  double nms_thresh = kDefaultNmsThreshold,
                                  double iou_thresh = kLocalizationIou) {
  if (distances.size() != corpus.queries.size())
    throw DimensionError("phrase_map: one distance list per query required");
  struct Detection {
    double dist;
    std::size_t query;
    std::size_t proposal;
  };
  std::map<std::string, std::vector<std::size_t>> by_phrase;
  std::vector<std::string> order;
  for (std::size_t qi = 0; qi < corpus.queries.size(); ++qi) {
    auto [it, fresh] = by_phrase.try_emplace(corpus.queries[qi].phrase_id);
    if (fresh) order.push_back(corpus.queries[qi].phrase_id);
    it->second.push_back(qi);
  }
  PhraseMapReport rep;
  double sum = 0.0;
  for (const auto& phrase : order) {
    const auto& qs = by_phrase[phrase];
    std::size_t gt_total = 0;
    for (std::size_t qi : qs) gt_total += corpus.queries[qi].gt.size();
    if (gt_total == 0) {
      rep.excluded.push_back(phrase);
      continue;
    }
    std::vector<Detection> dets;
    for (std::size_t qi : qs) {
      const auto& q = corpus.queries[qi];
      for (std::size_t p : nms(q.proposals, distances[qi], true, nms_thresh))
        dets.push_back({distances[qi][p], qi, p});
    }
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection& a, const Detection& b) { return a.dist < b.dist; });
    std::map<std::size_t, std::vector<bool>> used;
    for (std::size_t qi : qs) used[qi].assign(corpus.queries[qi].gt.size(), false);
    std::vector<bool> relevant;
    relevant.reserve(dets.size());
    for (const auto& det : dets) {
      const auto& q = corpus.queries[det.query];
      auto& u = used[det.query];
      double best = -1.0;
      std::size_t best_g = 0;
      for (std::size_t g = 0; g < q.gt.size(); ++g) {
        if (u[g]) continue;
        const double v = iou(q.proposals[det.proposal], q.gt[g]);
        if (v > best) {
          best = v;
          best_g = g;
        }
      }
      const bool ok = best >= iou_thresh;
      if (ok) u[best_g] = true;
      relevant.push_back(ok);
    }
    const double ap = average_precision(relevant);
    rep.ap[phrase] = ap;
    sum += ap;
  }
  rep.map = rep.ap.empty() ? 0.0 : sum / static_cast<double>(rep.ap.size());
  return rep;
}

}  // namespace dspe
