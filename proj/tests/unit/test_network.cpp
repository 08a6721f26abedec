#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dspe/checkpoint.hpp"
#include "dspe/gradcheck.hpp"
#include "dspe/loss.hpp"
#include "dspe/network.hpp"
#include "dspe/optimizer.hpp"

using namespace dspe;

namespace {

const BranchSpec kSx{6, 5, 4, 0.5};
const BranchSpec kSy{7, 5, 4, 0.5};

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.values()) v = rng.normal();
  return m;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dspe_test_" + name);
}

}  // namespace

TEST(InitParams, DeterministicGivenSeed) {
  EXPECT_EQ(init_params(kSx, kSy, 42), init_params(kSx, kSy, 42));
  EXPECT_NE(init_params(kSx, kSy, 42).x.w1, init_params(kSx, kSy, 43).x.w1);
}

TEST(InitParams, GlorotBoundAndIdentityBatchNorm) {
  const NetworkParams p = init_params(kSx, kSy, 1);
  const double a = std::sqrt(6.0 / (6 + 5));
  for (double v : p.x.w1.values()) EXPECT_LE(std::abs(v), a);
  for (double v : p.x.gamma) EXPECT_EQ(v, 1.0);
  for (double v : p.y.beta) EXPECT_EQ(v, 0.0);
  for (double v : p.y.running.var) EXPECT_EQ(v, 1.0);
}

TEST(InitParams, RejectsBadSpecs) {
  EXPECT_THROW(init_params({6, 5, 4, 0.5}, {7, 5, 3, 0.5}, 1), ConfigError);
  EXPECT_THROW(init_params({0, 5, 4, 0.5}, kSy, 1), ConfigError);
  EXPECT_THROW(init_params({6, 5, 4, 1.0}, kSy, 1), ConfigError);
}

TEST(ForwardBranch, EvalRowsAreUnitNorm) {
  Rng rng(2);
  const NetworkParams p = init_params({6, 64, 4, 0.5}, kSy, 2);
  const Matrix e = embed(p, Branch::x, random_matrix(9, 6, rng));
  for (std::size_t i = 0; i < e.rows(); ++i) EXPECT_NEAR(std::sqrt(squared_norm(e.row(i))), 1.0, 1e-10);
}

TEST(ForwardBranch, IdenticalRowsEmbedIdentically) {
  Rng rng(3);
  const NetworkParams p = init_params(kSx, kSy, 3);
  Matrix in = random_matrix(2, 7, rng);
  std::copy(in.row(0).begin(), in.row(0).end(), in.row(1).begin());
  const Matrix e = embed(p, Branch::y, in);
  for (std::size_t j = 0; j < e.cols(); ++j) EXPECT_EQ(e(0, j), e(1, j));
}

TEST(ForwardBranch, DistancesBoundedByTwo) {
  Rng rng(4);
  const NetworkParams p = init_params(kSx, kSy, 4);
  const Matrix d = pairwise_distances(embed(p, Branch::x, random_matrix(10, 6, rng)),
                                      embed(p, Branch::y, random_matrix(10, 7, rng)));
  for (double v : d.values()) EXPECT_LE(v, 2.0 + 1e-12);
}

TEST(ForwardBranch, Errors) {
  NetworkParams p = init_params(kSx, kSy, 5);
  Rng rng(5);
  EXPECT_THROW(forward_branch(p, Branch::x, Matrix(3, 7), Mode::eval, rng), DimensionError);
  EXPECT_THROW(forward_branch(p, Branch::x, Matrix(1, 6), Mode::train, rng), BatchTooSmallError);
}

TEST(ForwardBranch, TrainModeUpdatesRunningStatsEvalDoesNot) {
  NetworkParams p = init_params(kSx, kSy, 6);
  Rng rng(6);
  const Matrix in = random_matrix(5, 6, rng);
  const RunningStats before = p.x.running;
  forward_branch(p, Branch::x, in, Mode::eval, rng);
  EXPECT_EQ(p.x.running.mean, before.mean);
  forward_branch(p, Branch::x, in, Mode::train, rng);
  EXPECT_NE(p.x.running.mean, before.mean);
}

TEST(Backward, TapeIsSingleUse) {
  NetworkParams p = init_params(kSx, kSy, 7);
  Rng rng(7);
  auto f = forward_branch(p, Branch::x, random_matrix(4, 6, rng), Mode::train, rng);
  const Matrix g(4, 4, 0.1);
  EXPECT_NO_THROW(backward_branch(p, f.tape, g));
  EXPECT_THROW(backward_branch(p, f.tape, g), ContractViolation);
  auto fe = forward_branch(p, Branch::x, random_matrix(4, 6, rng), Mode::eval, rng);
  EXPECT_THROW(backward_branch(p, fe.tape, g), ContractViolation);
}

TEST(Backward, WrongBranchTapesRejected) {
  NetworkParams p = init_params(kSx, kSy, 8);
  OptimizerState opt = make_optimizer(p);
  Rng rng(8);
  auto fx = forward_branch(p, Branch::x, random_matrix(4, 6, rng), Mode::train, rng);
  auto fy = forward_branch(p, Branch::y, random_matrix(4, 7, rng), Mode::train, rng);
  EXPECT_THROW(backward_and_step(p, opt, fy.tape, fx.tape, Matrix(4, 4), Matrix(4, 4)),
               ContractViolation);
}

TEST(Sgd, OneStepOfTheRule) {
  Vector theta{1.0}, grad{0.5}, v{0.0};
  sgd_update(theta, grad, v, 0.1, 0.9, 0.0005);
  EXPECT_DOUBLE_EQ(v[0], 0.5005);
  EXPECT_DOUBLE_EQ(theta[0], 0.94995);
}

TEST(Sgd, ZeroGradientStillDecays) {
  Vector theta{2.0}, grad{0.0}, v{0.0};
  sgd_update(theta, grad, v, 0.1, 0.9, 0.0005);
  EXPECT_DOUBLE_EQ(theta[0], 2.0 - 0.1 * 0.0005 * 2.0);
}

TEST(Sgd, TwoStepsFollowRecurrence) {
  Vector theta{1.0}, grad{0.5}, v{0.0};
  double th = 1.0, vel = 0.0;
  for (int i = 0; i < 2; ++i) {
    vel = 0.9 * vel + (0.5 + 0.0005 * th);
    th -= 0.1 * vel;
    sgd_update(theta, grad, v, 0.1, 0.9, 0.0005);
  }
  EXPECT_EQ(theta[0], th);
  EXPECT_EQ(v[0], vel);
}

TEST(Sgd, WeightDecayOnlyOnAffineWeights) {
  NetworkParams p = init_params(kSx, kSy, 9);
  for (double& v : p.x.b1) v = 1.0;
  for (double& v : p.x.gamma) v = 2.0;
  OptimizerState opt = make_optimizer(p);
  const BranchParams before = p.x;
  apply_sgd(p.x, zero_grads_like(p.x), opt.velocity_x, opt);
  EXPECT_EQ(p.x.b1, before.b1);
  EXPECT_EQ(p.x.gamma, before.gamma);
  EXPECT_NE(p.x.w1, before.w1);
}

TEST(LrSchedule, StepDecay) {
  EXPECT_DOUBLE_EQ(lr_schedule(0), 0.1);
  EXPECT_DOUBLE_EQ(lr_schedule(9), 0.1);
  EXPECT_DOUBLE_EQ(lr_schedule(10), 0.01);
  EXPECT_DOUBLE_EQ(lr_schedule(25), 0.001);
}

TEST(Training, LossDecreasesOnFixedBatch) {
  NetworkParams p = init_params({6, 16, 8, 0.0}, {7, 16, 8, 0.0}, 10);
  SgdConfig sgd;
  sgd.lr0 = 0.05;
  OptimizerState opt = make_optimizer(p, sgd);
  Rng rng(10);
  const Matrix ix = random_matrix(6, 6, rng), iy = random_matrix(12, 7, rng);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < 6; ++i) {
    pairs.emplace_back(i, 2 * i);
    pairs.emplace_back(i, 2 * i + 1);
  }
  const BatchStructure s = BatchStructure::from_pairs(6, 12, pairs);
  LossConfig cfg;
  cfg.margin = 0.5;
  std::vector<double> losses;
  for (int step = 0; step < 10; ++step) {
    auto fx = forward_branch(p, Branch::x, ix, Mode::train, rng);
    auto fy = forward_branch(p, Branch::y, iy, Mode::train, rng);
    LossResult l = hinge_loss(fx.output, fy.output, mine_triplets(fx.output, fy.output, s, cfg), cfg);
    losses.push_back(l.loss());
    backward_and_step(p, opt, fx.tape, fy.tape, l.grad_x, l.grad_y);
  }
  EXPECT_LT(losses.back(), losses.front());
}

TEST(NetworkGradient, EndToEndCheckPasses) {
  for (std::uint64_t s = 1; s <= 5; ++s) {
    const GradCheckResult r = check_network(s);
    EXPECT_TRUE(r.passed) << "seed " << s << " err " << r.max_rel_error;
    EXPECT_GT(r.entries, 100u);
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  NetworkParams p = init_params(kSx, kSy, 0x123456789abcdefULL);
  OptimizerState opt = make_optimizer(p);
  opt.begin_epoch(12);
  opt.step = 77;
  opt.velocity_x.w1(1, 2) = 0.25;
  p.x.running.var[1] = 3.5;
  const auto path = temp_file("roundtrip.ckpt");
  save_checkpoint(p, opt, path);
  const Checkpoint ck = load_checkpoint(path);
  EXPECT_EQ(ck.params, p);
  EXPECT_EQ(ck.optimizer.step, 77u);
  EXPECT_EQ(ck.optimizer.epoch, 12u);
  EXPECT_EQ(ck.optimizer.lr, opt.lr);
  EXPECT_EQ(ck.optimizer.velocity_x.w1, opt.velocity_x.w1);
  EXPECT_EQ(serialize_checkpoint(ck.params, ck.optimizer), serialize_checkpoint(p, opt));
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncatedFileFailsChecksum) {
  const NetworkParams p = init_params(kSx, kSy, 1);
  const std::string bytes = serialize_checkpoint(p, make_optimizer(p));
  EXPECT_THROW(deserialize_checkpoint(std::string_view(bytes).substr(0, bytes.size() - 9)),
               ChecksumError);
  std::string flipped = bytes;
  flipped[40] ^= 0x01;
  EXPECT_THROW(deserialize_checkpoint(flipped), ChecksumError);
}

TEST(Checkpoint, EvalMetricsUnchangedAfterReload) {
  const NetworkParams p = init_params(kSx, kSy, 3);
  Rng rng(3);
  const Matrix in = random_matrix(5, 6, rng);
  const auto path = temp_file("eval.ckpt");
  save_checkpoint(p, make_optimizer(p), path);
  EXPECT_EQ(embed(load_checkpoint(path).params, Branch::x, in), embed(p, Branch::x, in));
  std::filesystem::remove(path);
}

TEST(Checkpoint, MissingFileIsARuntimeError) {
  EXPECT_THROW(load_checkpoint(temp_file("does_not_exist.ckpt")), Error);
}
