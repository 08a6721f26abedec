#include <gtest/gtest.h>

#include <cmath>

#include "dspe/eval.hpp"
#include "dspe/random.hpp"

using namespace dspe;

namespace {

LocalizationQuery query(const std::string& phrase, std::vector<Box> proposals, std::vector<Box> gt) {
  LocalizationQuery q;
  q.image_id = "img_" + phrase + std::to_string(proposals.size());
  q.phrase_id = phrase;
  q.proposals = std::move(proposals);
  q.proposal_rows.assign(q.proposals.size(), 0);
  q.gt = std::move(gt);
  return q;
}

const Box kGt{0, 0, 10, 10};
const Box kHit{0, 0, 10, 9};   // IoU 0.9 with kGt
const Box kMiss{50, 50, 60, 60};

}  // namespace

TEST(Recall, DiagonalIsPerfect) {
  Matrix d(3, 3, 1.0);
  for (std::size_t i = 0; i < 3; ++i) d(i, i) = 0.1;
  EXPECT_DOUBLE_EQ(recall_at_k(d, {{0}, {1}, {2}}, 1), 100.0);
}

TEST(Recall, FifthRankedPositive) {
  Matrix d(1, 12);
  for (std::size_t c = 0; c < 12; ++c) d(0, c) = 0.1 * static_cast<double>(c + 1);
  const std::vector<std::vector<std::size_t>> pos{{4}};
  EXPECT_DOUBLE_EQ(recall_at_k(d, pos, 1), 0.0);
  EXPECT_DOUBLE_EQ(recall_at_k(d, pos, 4), 0.0);
  EXPECT_DOUBLE_EQ(recall_at_k(d, pos, 5), 100.0);
  EXPECT_DOUBLE_EQ(recall_at_k(d, pos, 10), 100.0);
}

TEST(Recall, TiesRankByIndex) {
  Matrix d(1, 2, 0.5);
  EXPECT_DOUBLE_EQ(recall_at_k(d, {{1}}, 1), 0.0);
  EXPECT_DOUBLE_EQ(recall_at_k(d, {{0}}, 1), 100.0);
}

TEST(Recall, Errors) {
  Matrix d(2, 2, 0.5);
  EXPECT_THROW(recall_at_k(d, {{0}, {1}}, 0), ConfigError);
  EXPECT_THROW(recall_at_k(d, {{0}, {}}, 1), EvaluationError);
  EXPECT_THROW(recall_at_k(d, {{0}}, 1), DimensionError);
}

TEST(Recall, MonotoneInKAndInvariantUnderIncreasingMaps) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix d(15, 25);
    for (double& v : d.values()) v = rng.uniform(0.0, 2.0);
    std::vector<std::vector<std::size_t>> pos(15);
    for (auto& p : pos)
      for (int j = 0; j < 3; ++j) p.push_back(rng.below(25));
    Matrix e = d;
    for (double& v : e.values()) v = std::exp(3.0 * v) + 1.0;
    double prev = 0.0;
    for (std::size_t k = 1; k <= 25; ++k) {
      const double r = recall_at_k(d, pos, k);
      EXPECT_GE(r, prev);
      EXPECT_EQ(r, recall_at_k(e, pos, k));
      prev = r;
    }
    EXPECT_DOUBLE_EQ(prev, 100.0);
  }
}

TEST(Iou, Examples) {
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {5, 5, 15, 15}), 25.0 / 175.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 2, 2}, {1, 1, 3, 3}), 1.0 / 7.0);
  EXPECT_DOUBLE_EQ(iou(kGt, kGt), 1.0);
  EXPECT_DOUBLE_EQ(iou(kGt, kMiss), 0.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 1, 1}, {1, 0, 2, 1}), 0.0);
}

TEST(Iou, SymmetricAndBounded) {
  Rng rng(12);
  for (int i = 0; i < 200; ++i) {
    const double ax = rng.uniform(0, 50), ay = rng.uniform(0, 50);
    const double bx = rng.uniform(0, 50), by = rng.uniform(0, 50);
    const Box a{ax, ay, ax + rng.uniform(1, 30), ay + rng.uniform(1, 30)};
    const Box b{bx, by, bx + rng.uniform(1, 30), by + rng.uniform(1, 30)};
    EXPECT_EQ(iou(a, b), iou(b, a));
    EXPECT_GE(iou(a, b), 0.0);
    EXPECT_LE(iou(a, b), 1.0);
  }
}

TEST(Box, ValidateRejectsEmpty) {
  EXPECT_THROW((Box{0, 0, 0, 1}).validate(), ConsistencyError);
  EXPECT_NO_THROW((Box{0, 0, 1, 1}).validate());
}

TEST(Nms, SuppressesOverlapAboveThreshold) {
  const std::vector<Box> boxes{{0, 0, 10, 10}, {0, 0, 10, 6}};  // IoU 0.6
  EXPECT_EQ(nms(boxes, {0.1, 0.2}, true, 0.5), std::vector<std::size_t>{0});
  EXPECT_EQ(nms(boxes, {0.1, 0.2}, true, 0.7), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(nms(boxes, {0.1, 0.2}, false, 0.5), std::vector<std::size_t>{1});
}

TEST(Nms, DisjointBoxesAllKeptInScoreOrder) {
  const std::vector<Box> boxes{kGt, kMiss, {20, 20, 30, 30}};
  EXPECT_EQ(nms(boxes, {0.3, 0.1, 0.2}, true, 0.3), (std::vector<std::size_t>{1, 2, 0}));
  EXPECT_THROW(nms(boxes, {0.1}, true, 0.3), DimensionError);
}

TEST(AveragePrecision, Examples) {
  EXPECT_NEAR(average_precision({true, false, true}), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  EXPECT_DOUBLE_EQ(average_precision({true, true, true}), 1.0);
  EXPECT_DOUBLE_EQ(average_precision({false, false}), 0.0);
}

TEST(LocalizationRecall, ThreeQueries) {
  LocalizationCorpus c;
  c.queries.push_back(query("a", {kHit, kMiss}, {kGt}));
  c.queries.push_back(query("b", {kMiss, kHit}, {kGt}));
  c.queries.push_back(query("c", {kMiss, {70, 70, 80, 80}}, {kGt}));
  const std::vector<std::vector<double>> d{{0.1, 0.2}, {0.1, 0.2}, {0.1, 0.2}};
  EXPECT_NEAR(localization_recall_at_k(c, d, 1), 100.0 / 3.0, 1e-12);
  EXPECT_NEAR(localization_recall_at_k(c, d, 5), 200.0 / 3.0, 1e-12);
  EXPECT_THROW(localization_recall_at_k(c, d, 0), ConfigError);
  EXPECT_THROW(localization_recall_at_k(c, {{0.1}}, 1), DimensionError);
}

TEST(PhraseMap, TwoPhrasesAndAnExcludedOne) {
  LocalizationCorpus c;
  c.queries.push_back(query("a", {kHit, kMiss}, {kGt}));   // miss ranked first: AP 0.5
  c.queries.push_back(query("b", {kHit, kMiss}, {kGt}));   // hit ranked first: AP 1
  c.queries.push_back(query("z", {kHit}, {}));
  const std::vector<std::vector<double>> d{{0.2, 0.1}, {0.1, 0.2}, {0.1}};
  const PhraseMapReport r = phrase_map(c, d);
  EXPECT_DOUBLE_EQ(r.ap.at("a"), 0.5);
  EXPECT_DOUBLE_EQ(r.ap.at("b"), 1.0);
  EXPECT_DOUBLE_EQ(r.map, 0.75);
  EXPECT_EQ(r.excluded, std::vector<std::string>{"z"});
}

TEST(PhraseMap, GroundTruthMatchedOnlyOnce) {
  LocalizationCorpus c;
  c.queries.push_back(query("a", {kHit, kGt}, {kGt}));
  const std::vector<std::vector<double>> d{{0.1, 0.2}};
  // without suppression the duplicate detection is a false positive
  EXPECT_DOUBLE_EQ(phrase_map(c, d, 1.0).ap.at("a"), 1.0);
  c.queries.push_back(query("a", {kHit}, {kGt}));
  const std::vector<std::vector<double>> d2{{0.1, 0.15}, {0.2}};
  EXPECT_NEAR(phrase_map(c, d2, 1.0).ap.at("a"), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
}

TEST(PhraseMap, PoolsQueriesOfThePhrase) {
  LocalizationCorpus c;
  c.queries.push_back(query("a", {kMiss}, {kGt}));
  c.queries.push_back(query("a", {kHit, {20, 20, 30, 30}}, {kGt}));
  const std::vector<std::vector<double>> d{{0.1}, {0.3, 0.2}};
  // ranked: miss, miss, hit
  EXPECT_NEAR(phrase_map(c, d).ap.at("a"), 1.0 / 3.0, 1e-15);
}

TEST(WeightedDistance, Example) {
  EXPECT_NEAR(weighted_distance(0.4, 0.1, 0.6), 0.22, 1e-15);
  EXPECT_EQ(weighted_distance(0.4, 0.1, 0.0), 0.4);
  EXPECT_EQ(weighted_distance(0.4, 0.1, 1.0), 0.1);
  EXPECT_THROW(weighted_distance(0.4, 0.1, 1.5), ConfigError);
  EXPECT_THROW(weighted_distance(0.4, 0.1, -0.1), ConfigError);
}

TEST(RegionPhraseDistance, MeanOfNearestRegion) {
  Matrix phrases(2, 1), regions(2, 1);
  phrases(0, 0) = 0.0;
  phrases(1, 0) = 1.0;
  regions(0, 0) = 0.2;
  regions(1, 0) = 1.3;
  EXPECT_NEAR(*region_phrase_distance(select_rows(phrases, std::vector<std::size_t>{0}), regions),
              0.2, 1e-9);
  EXPECT_NEAR(*region_phrase_distance(select_rows(phrases, std::vector<std::size_t>{1}), regions),
              0.3, 1e-9);
  EXPECT_NEAR(*region_phrase_distance(phrases, regions), 0.25, 1e-9);
  EXPECT_FALSE(region_phrase_distance(Matrix(0, 1), regions).has_value());
  EXPECT_THROW(region_phrase_distance(phrases, Matrix(0, 1)), EvaluationError);
}

TEST(Fuse, FallsBackToGlobalAndCanReorder) {
  Matrix g(1, 3);
  g(0, 0) = 0.5;
  g(0, 1) = 0.6;
  g(0, 2) = 0.55;
  const std::vector<std::vector<std::optional<double>>> rp{{0.9, 0.1, std::nullopt}};
  const Matrix f0 = fuse_distances(g, rp, 0.0);
  EXPECT_EQ(f0, g);
  const Matrix f7 = fuse_distances(g, rp, 0.7);
  EXPECT_NEAR(f7(0, 0), 0.78, 1e-15);
  EXPECT_NEAR(f7(0, 1), 0.25, 1e-15);
  EXPECT_EQ(f7(0, 2), 0.55);
  EXPECT_DOUBLE_EQ(recall_at_k(g, {{1}}, 1), 0.0);
  EXPECT_DOUBLE_EQ(recall_at_k(f7, {{1}}, 1), 100.0);
  EXPECT_THROW(fuse_distances(g, {{0.1}}, 0.5), DimensionError);
}
