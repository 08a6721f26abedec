#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "dspe/hard_negatives.hpp"
#include "dspe/synthetic.hpp"

using namespace dspe;

namespace {

// Embeds a positive 2-d feature as itself, normalized.
NetworkParams identity_model() {
  NetworkParams p = init_params({2, 2, 2, 0.5}, {2, 2, 2, 0.5}, 1);
  for (BranchParams* b : {&p.x, &p.y}) {
    b->w1 = Matrix(2, 2);
    b->w2 = Matrix(2, 2);
    b->w1(0, 0) = b->w1(1, 1) = b->w2(0, 0) = b->w2(1, 1) = 1.0;
    b->b1.assign(2, 0.0);
    b->b2.assign(2, 0.0);
  }
  return p;
}

void push_angle(FeatureSet& fs, const std::string& id, double theta) {
  Matrix m(fs.features.rows() + 1, 2);
  for (std::size_t r = 0; r < fs.features.rows(); ++r)
    for (std::size_t c = 0; c < 2; ++c) m(r, c) = fs.features(r, c);
  m(fs.features.rows(), 0) = std::cos(theta);
  m(fs.features.rows(), 1) = std::sin(theta);
  fs.features = std::move(m);
  fs.ids.push_back(id);
}

FeatureSet two_phrases() {
  FeatureSet p;
  p.features = Matrix(0, 2);
  push_angle(p, "phrase_a", 0.0);
  push_angle(p, "phrase_b", 1.5);
  return p;
}

const Box kGt{0, 0, 10, 10};
const Box kFar{50, 50, 60, 60};

double chord(double angle) { return 2.0 * std::sin(angle / 2.0); }

}  // namespace

TEST(MineHardNegatives, DefinitionOnAHandBuiltImage) {
  FeatureSet regions;
  regions.features = Matrix(0, 2);
  push_angle(regions, "gt", 0.3);
  push_angle(regions, "low_iou_closer", 0.25);   // IoU 0.11 with the GT box
  push_angle(regions, "high_iou_closer", 0.2);   // IoU 0.8
  push_angle(regions, "far_away", 0.5);
  const std::vector<BoxRecord> recs{
      {"im0", 'G', "phrase_a", kGt, 0},
      {"im0", 'P', "-", {8, 0, 18, 10}, 1},
      {"im0", 'P', "-", {0, 0, 10, 8}, 2},
      {"im0", 'P', "-", kFar, 3},
  };
  const LocalizationCorpus c = assemble_corpus(recs, regions, two_phrases());
  const HardNegativeSet s = mine_hard_negatives(identity_model(), c);
  ASSERT_EQ(s.by_phrase.size(), 1u);
  const auto& negs = s.by_phrase.at("phrase_a");
  ASSERT_EQ(negs.size(), 1u);
  EXPECT_EQ(negs[0].region_row, 1u);
  EXPECT_NEAR(negs[0].distance, chord(0.25), 1e-6);
}

TEST(MineHardNegatives, PhraseWithoutGroundTruthFeaturesIsSkipped) {
  FeatureSet regions;
  regions.features = Matrix(0, 2);
  push_angle(regions, "p0", 0.1);
  const std::vector<BoxRecord> recs{{"im0", 'G', "phrase_b", kGt, std::nullopt},
                                    {"im0", 'P', "-", kFar, 0}};
  const HardNegativeSet s =
      mine_hard_negatives(identity_model(), assemble_corpus(recs, regions, two_phrases()));
  EXPECT_TRUE(s.by_phrase.empty());
  EXPECT_EQ(s.skipped, std::vector<std::string>{"phrase_b"});
}

TEST(MineHardNegatives, CapKeepsTheClosest) {
  FeatureSet regions;
  regions.features = Matrix(0, 2);
  push_angle(regions, "gt0", 1.0);
  push_angle(regions, "gt1", 1.0);
  std::vector<BoxRecord> recs{{"im0", 'G', "phrase_a", kGt, 0}, {"im1", 'G', "phrase_a", kGt, 1}};
  for (std::size_t i = 0; i < 120; ++i) {
    push_angle(regions, "p" + std::to_string(i), 0.005 * static_cast<double>(119 - i));
    recs.push_back({i < 60 ? "im0" : "im1", 'P', "-", kFar, i + 2});
  }
  const HardNegativeSet s =
      mine_hard_negatives(identity_model(), assemble_corpus(recs, regions, two_phrases()), 50);
  const auto& negs = s.by_phrase.at("phrase_a");
  ASSERT_EQ(negs.size(), 50u);
  for (std::size_t k = 0; k < 50; ++k) EXPECT_EQ(negs[k].region_row, 121u - k);
}

namespace {

struct LocFixture {
  LocalizationCorpus corpus;
  Dataset data;
  NetworkParams model;
};

LocFixture loc_fixture() {
  LocalizationSynthConfig lc;
  const LocalizationWorld w(lc, 5);
  LocFixture f;
  f.corpus = w.generate(40, 6, "t_").corpus;
  f.data = localization_dataset(f.corpus);
  f.model = init_params({lc.feat_dim_x, 16, 8, 0.5}, {lc.feat_dim_y, 16, 8, 0.5}, 7);
  return f;
}

TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 2;
  c.batch_pairs = 16;
  c.sgd.lr0 = 0.03;
  return c;
}

}  // namespace

TEST(MineHardNegatives, DeterministicAndRoundTrips) {
  const LocFixture f = loc_fixture();
  const HardNegativeSet a = mine_hard_negatives(f.model, f.corpus);
  EXPECT_EQ(a, mine_hard_negatives(f.model, f.corpus));
  ASSERT_GT(a.total(), 0u);
  const auto path = std::filesystem::temp_directory_path() / "dspe_test_negs.tsv";
  write_hard_negatives(path, a);
  EXPECT_EQ(read_hard_negatives(path).by_phrase, a.by_phrase);
  std::filesystem::remove(path);
}

TEST(FineTune, StructureWeightsForcedToZeroWithWarning) {
  const LocFixture f = loc_fixture();
  const HardNegativeSet negs = mine_hard_negatives(f.model, f.corpus);
  TrainConfig with = small_config();
  with.loss.lambda3 = 0.2;
  TrainConfig without = small_config();
  without.loss.lambda3 = 0.0;
  NetworkParams a = f.model, b = f.model;
  std::ostringstream log_a, log_b;
  fine_tune(a, f.data, negs, with, &log_a);
  fine_tune(b, f.data, negs, without, &log_b);
  EXPECT_NE(log_a.str().find("warning"), std::string::npos);
  EXPECT_TRUE(log_b.str().empty());
  EXPECT_EQ(a, b);
}

TEST(FineTune, EmptySetIsOrdinaryContinuedTraining) {
  const LocFixture f = loc_fixture();
  TrainConfig cfg = small_config();
  cfg.loss.lambda3 = 0.0;
  NetworkParams a = f.model, b = f.model;
  fine_tune(a, f.data, HardNegativeSet{}, cfg, nullptr);
  OptimizerState opt = make_optimizer(b, cfg.sgd);
  train(b, opt, f.data, cfg);
  EXPECT_EQ(a, b);
}

TEST(FineTune, HardNegativesChangeTheUpdate) {
  const LocFixture f = loc_fixture();
  const HardNegativeSet negs = mine_hard_negatives(f.model, f.corpus);
  ASSERT_GT(negs.total(), 0u);
  TrainConfig cfg = small_config();
  cfg.loss.lambda3 = 0.0;
  NetworkParams a = f.model, b = f.model;
  fine_tune(a, f.data, negs, cfg, nullptr);
  fine_tune(b, f.data, HardNegativeSet{}, cfg, nullptr);
  EXPECT_NE(a, b);
}

TEST(ToPool, RejectsUnknownPhraseAndBadRow) {
  const LocFixture f = loc_fixture();
  HardNegativeSet unknown;
  unknown.by_phrase["no_such_phrase"] = {{0, 0.1}};
  EXPECT_THROW(to_pool(unknown, f.data), ConsistencyError);
  HardNegativeSet bad_row;
  bad_row.by_phrase[f.data.y.ids[0]] = {{f.data.x.size(), 0.1}};
  EXPECT_THROW(to_pool(bad_row, f.data), ConsistencyError);
}
