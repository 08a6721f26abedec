#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "dspe/gradcheck.hpp"
#include "dspe/loss.hpp"
#include "dspe/loss_reference.hpp"

using namespace dspe;

namespace {

/// Embeddings on a line so distances are exactly the coordinate gaps.
Matrix line(std::initializer_list<double> xs) {
  Matrix m(xs.size(), 1);
  std::size_t i = 0;
  for (double x : xs) m(i++, 0) = x;
  return m;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.values()) v = rng.normal();
  return m;
}

BatchStructure two_images_five_sentences() {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t j = 0; j < 10; ++j) pairs.emplace_back(j / 5, j);
  return BatchStructure::from_pairs(2, 10, pairs);
}

}  // namespace

TEST(MineTriplets, ViolatedNegativeIncluded) {
  // x0 at 0, its positive at 0.2, an unpaired sentence at 0.25
  const Matrix ex = line({0.0, 10.0}), ey = line({0.2, 0.25, 10.0});
  const BatchStructure s = BatchStructure::from_pairs(2, 3, {{0, 0}, {1, 2}});
  LossConfig cfg;
  cfg.lambda3 = 0.0;
  const TripletSet t = mine_triplets(ex, ey, s, cfg);
  ASSERT_EQ(t[Family::image_to_sentence].size(), 1u);
  const Triplet& tr = t[Family::image_to_sentence][0];
  EXPECT_EQ(tr.anchor, 0u);
  EXPECT_EQ(tr.positive, 0u);
  EXPECT_EQ(tr.negative, 1u);
  EXPECT_NEAR(tr.violation, 0.05, 1e-15);
}

TEST(MineTriplets, SatisfiedConstraintExcluded) {
  const Matrix ex = line({0.0, 10.0}), ey = line({0.2, 0.5});
  const BatchStructure s = BatchStructure::from_pairs(2, 2, {{0, 0}, {1, 1}});
  EXPECT_TRUE(mine_triplets(ex, ey, s, {})[Family::image_to_sentence].empty());
}

TEST(MineTriplets, BoundaryViolationExcluded) {
  const Matrix ex = line({0.0, 10.0}), ey = line({0.25, 0.5});
  const BatchStructure s = BatchStructure::from_pairs(2, 2, {{0, 0}, {1, 1}});
  LossConfig cfg;
  cfg.margin = 0.25;
  EXPECT_TRUE(mine_triplets(ex, ey, s, cfg)[Family::image_to_sentence].empty());
}

TEST(MineTriplets, EqualsEnumerationOnRandomBatch) {
  Rng rng(12);
  const BatchStructure s = two_images_five_sentences();
  const Matrix ex = random_matrix(2, 3, rng), ey = random_matrix(10, 3, rng);
  LossConfig cfg;
  cfg.lambda2 = 0.1;
  cfg.margin = 1.0;
  const TripletSet mined = mine_triplets(ex, ey, s, cfg);
  for (Family f : kFamilies) {
    std::size_t n = 0;
    for (const auto& [key, list] : reference::enumerate_violations(ex, ey, s, cfg.margin, f))
      n += list.size();
    EXPECT_EQ(mined[f].size(), n) << family_name(f);
  }
}

TEST(MineTriplets, TopKCapAndOrdering) {
  Rng rng(13);
  const BatchStructure s = two_images_five_sentences();
  const Matrix ex = random_matrix(2, 3, rng), ey = random_matrix(10, 3, rng);
  LossConfig cfg;
  cfg.margin = 3.0;
  cfg.top_k = 2;
  const TripletSet t = mine_triplets(ex, ey, s, cfg);
  for (const auto& fam : t.families)
    for (const Triplet& tr : fam) EXPECT_GT(tr.violation, 0.0);
  for (Family f : kFamilies) {
    std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> fam;
    for (const Triplet& tr : t[f]) fam[{tr.anchor, tr.positive}].push_back(tr.violation);
    for (const auto& [k, v] : fam) {
      EXPECT_LE(v.size(), 2u);
      EXPECT_TRUE(std::is_sorted(v.rbegin(), v.rend()));
    }
  }
}

TEST(MineTriplets, TiesGoToLowerNegativeIndex) {
  // y1 and y2 equidistant from x0
  const Matrix ex = line({0.0, 10.0, 20.0}), ey = line({0.05, 0.1, -0.1, 10.0, 20.0});
  const BatchStructure s = BatchStructure::from_pairs(3, 5, {{0, 0}, {1, 3}, {2, 4}});
  LossConfig cfg;
  cfg.top_k = 1;
  const auto& f1 = mine_triplets(ex, ey, s, cfg)[Family::image_to_sentence];
  ASSERT_EQ(f1.size(), 1u);
  EXPECT_EQ(f1[0].negative, 1u);
}

TEST(MineTriplets, NeighborsAreNeverNegatives) {
  Rng rng(14);
  const BatchStructure s = two_images_five_sentences();
  const Matrix ex = random_matrix(2, 3, rng), ey = random_matrix(10, 3, rng);
  LossConfig cfg;
  cfg.margin = 5.0;
  cfg.lambda2 = 1.0;
  const TripletSet t = mine_triplets(ex, ey, s, cfg);
  for (const Triplet& tr : t[Family::image_to_sentence]) EXPECT_FALSE(s.same_y(tr.positive, tr.negative));
  for (const Triplet& tr : t[Family::sentence_structure]) EXPECT_FALSE(s.same_y(tr.anchor, tr.negative));
  EXPECT_FALSE(t[Family::sentence_structure].empty());
}

TEST(MineTriplets, ImageStructureTrivialWithoutSharedSentences) {
  Rng rng(15);
  const BatchStructure s = two_images_five_sentences();
  LossConfig cfg;
  cfg.lambda2 = 1.0;
  cfg.margin = 5.0;
  EXPECT_TRUE(mine_triplets(random_matrix(2, 3, rng), random_matrix(10, 3, rng), s, cfg)
                  [Family::image_structure]
                      .empty());
}

TEST(MineTriplets, HardNegativesOnlyAgainstTheirPhrase) {
  // x2 is a negative-only row registered for y0
  const Matrix ex = line({0.0, 5.0, 0.01}), ey = line({0.0, 5.0});
  BatchStructure s = BatchStructure::from_pairs(3, 2, {{0, 0}, {1, 1}});
  s.add_hard_negative(2, 0);
  LossConfig cfg;
  cfg.lambda3 = 0.0;
  cfg.margin = 0.5;
  const TripletSet t = mine_triplets(ex, ey, s, cfg);
  ASSERT_EQ(t[Family::sentence_to_image].size(), 1u);
  EXPECT_EQ(t[Family::sentence_to_image][0].anchor, 0u);
  EXPECT_EQ(t[Family::sentence_to_image][0].negative, 2u);
  for (const Triplet& tr : t[Family::image_to_sentence]) EXPECT_NE(tr.anchor, 2u);
}

TEST(MineTriplets, HardNegativeWithPositiveRejected) {
  BatchStructure s = BatchStructure::from_pairs(2, 2, {{0, 0}, {1, 1}});
  EXPECT_THROW(s.add_hard_negative(1, 0), ConsistencyError);
}

TEST(HingeLoss, EmptyTripletsGiveZero) {
  Rng rng(16);
  const LossResult r = hinge_loss(random_matrix(3, 4, rng), random_matrix(5, 4, rng), {}, {});
  EXPECT_EQ(r.loss(), 0.0);
  EXPECT_EQ(r.grad_x, Matrix(3, 4));
  EXPECT_EQ(r.grad_y, Matrix(5, 4));
}

TEST(HingeLoss, Lambda1WeightsSentenceToImage) {
  // anchor y0 at 0, positive x0 at 0.2, negative x1 at 0.25 -> violation 0.05
  const Matrix ex = line({0.2, 0.25}), ey = line({0.0});
  TripletSet t;
  t[Family::sentence_to_image].push_back({0, 0, 1, 0.05});
  LossConfig cfg;
  const LossResult r = hinge_loss(ex, ey, t, cfg);
  EXPECT_NEAR(r.loss(), 0.10, 1e-15);
  EXPECT_NEAR(r.terms[Family::sentence_to_image], 0.05, 1e-15);
}

TEST(HingeLoss, UntouchedRowsGetZeroGradient) {
  Rng rng(17);
  const Matrix ex = random_matrix(4, 3, rng), ey = random_matrix(4, 3, rng);
  TripletSet t;
  t[Family::image_to_sentence].push_back({0, 0, 1, 0.0});
  LossConfig cfg;
  cfg.margin = 100.0;
  const LossResult r = hinge_loss(ex, ey, t, cfg);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(r.grad_x(3, j), 0.0);
    EXPECT_EQ(r.grad_y(2, j), 0.0);
    EXPECT_EQ(r.grad_y(3, j), 0.0);
  }
}

TEST(HingeLoss, GradientMatchesFiniteDifferences) {
  Rng rng(18);
  const BatchStructure s = two_images_five_sentences();
  Matrix ex = random_matrix(2, 3, rng), ey = random_matrix(10, 3, rng);
  LossConfig cfg;
  cfg.margin = 1.0;
  cfg.lambda2 = 0.3;
  const TripletSet t = mine_triplets(ex, ey, s, cfg);
  const LossResult r = hinge_loss(ex, ey, t, cfg);
  auto loss = [&] { return hinge_loss(ex, ey, t, cfg).loss(); };
  GradCheckConfig gc;
  EXPECT_LT(compare_gradient(ex.values(), r.grad_x.values(), loss, gc), 1e-5);
  EXPECT_LT(compare_gradient(ey.values(), r.grad_y.values(), loss, gc), 1e-5);
}

TEST(HingeLoss, OutOfRangeTripletRejected) {
  TripletSet t;
  t[Family::image_to_sentence].push_back({5, 0, 1, 0.1});
  EXPECT_THROW(hinge_loss(Matrix(2, 2), Matrix(2, 2), t, {}), DimensionError);
}

TEST(BruteForce, EqualsMinedWithUnboundedK) {
  Rng rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    const BatchStructure s = two_images_five_sentences();
    const Matrix ex = random_matrix(2, 4, rng), ey = random_matrix(10, 4, rng);
    LossConfig cfg;
    cfg.margin = 0.8;
    cfg.lambda2 = 0.1;
    cfg.top_k = 1000000;
    const double mined = hinge_loss(ex, ey, mine_triplets(ex, ey, s, cfg), cfg).loss();
    const double brute = reference::brute_force_loss(ex, ey, s, cfg).total;
    EXPECT_NEAR(mined, brute, 1e-9 * std::max(1.0, brute));
  }
}

TEST(BruteForce, ZeroStructureWeightsLeaveOnlyRanking) {
  Rng rng(20);
  const BatchStructure s = two_images_five_sentences();
  const Matrix ex = random_matrix(2, 4, rng), ey = random_matrix(10, 4, rng);
  LossConfig cfg;
  cfg.margin = 2.0;
  cfg.lambda2 = cfg.lambda3 = 0.0;
  const LossTerms t = reference::brute_force_loss(ex, ey, s, cfg);
  EXPECT_EQ(t.sums[2], 0.0);
  EXPECT_EQ(t.sums[3], 0.0);
  EXPECT_DOUBLE_EQ(t.total, t.sums[0] + cfg.lambda1 * t.sums[1]);
}

TEST(BruteForce, SeparatedClustersHaveZeroLoss) {
  const Matrix ex = line({0.0, 100.0}), ey = line({0.0, 0.0, 100.0, 100.0});
  const BatchStructure s = BatchStructure::from_pairs(2, 4, {{0, 0}, {0, 1}, {1, 2}, {1, 3}});
  LossConfig cfg;
  cfg.margin = 1e-9;
  cfg.lambda2 = 1.0;
  EXPECT_EQ(reference::brute_force_loss(ex, ey, s, cfg).total, 0.0);
}

TEST(LossConfig, Validation) {
  LossConfig c;
  c.margin = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.top_k = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lambda3 = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
}
