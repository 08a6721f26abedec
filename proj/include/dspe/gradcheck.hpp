#pragma once

// Central finite-difference checks of every layer's backward pass and of the
// full ranking loss through both branches.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dspe/layers.hpp"
#include "dspe/loss.hpp"
#include "dspe/matrix.hpp"
#include "dspe/network.hpp"
#include "dspe/random.hpp"

namespace dspe {

struct GradCheckConfig {
  double step = 1e-5;
  double tolerance = 1e-4;
  double floor = 1e-6;       // denominator floor for the relative error
  double kink_margin = 1e-3;  // minimum distance from ReLU/hinge kinks and zero distances
  std::size_t max_attempts = 50;
};

struct GradCheckResult {
  std::string name;
  std::uint64_t seed = 0;
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  bool passed = false;
};

/// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares `analytic` against central differences of `loss` with respect
/// to every entry of `param`, which is perturbed in place and restored.
/// Entries below the difference quotient's resolution (cancellation error of
/// about 16 ulp of the loss over 2h) are judged against that resolution.
inline double compare_gradient(std::span<double> param, std::span<const double> analytic,
                               const std::function<double()>& loss, const GradCheckConfig& cfg) {
  if (param.size() != analytic.size()) throw DimensionError("gradient check: size mismatch");
  const double base = loss();
  const double resolution = 16.0 * std::numeric_limits<double>::epsilon() *
                            std::max(1.0, std::abs(base)) / (2.0 * cfg.step);
  const double floor = std::max(cfg.floor, resolution / cfg.tolerance);
  double worst = 0.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double saved = param[i];
    param[i] = saved + cfg.step;
    const double up = loss();
    param[i] = saved - cfg.step;
    const double down = loss();
    param[i] = saved;
    const double numeric = (up - down) / (2.0 * cfg.step);
    worst = std::max(worst, relative_error(analytic[i], numeric, floor));
  }
  return worst;
}

namespace detail {

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.values()) v = scale * rng.normal();
  return m;
}

inline Vector random_vector(std::size_t n, Rng& rng, double scale = 1.0) {
  Vector v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

/// sum(out .* weights): a scalar whose gradient wrt `out` is `weights`.
inline double weighted_sum(const Matrix& out, const Matrix& weights) {
  double s = 0.0;
  auto a = out.values();
  auto b = weights.values();
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double min_abs(std::span<const double> v) {
  double m = std::numeric_limits<double>::infinity();
  for (double x : v) m = std::min(m, std::abs(x));
  return m;
}

struct Tracker {
  GradCheckResult result;
  const GradCheckConfig& cfg;

  void add(double err, std::size_t n) {
    result.max_rel_error = std::max(result.max_rel_error, err);
    result.entries += n;
  }
  GradCheckResult finish() {
    result.passed = result.entries > 0 && result.max_rel_error < cfg.tolerance;
    return result;
  }
};

}  // namespace detail

inline GradCheckResult check_affine(std::uint64_t seed, const GradCheckConfig& cfg = {}) {
  Rng rng(seed);
  Matrix in = detail::random_matrix(5, 7, rng);
  Matrix w = detail::random_matrix(7, 3, rng);
  Vector b = detail::random_vector(3, rng);
  const Matrix up = detail::random_matrix(5, 3, rng);
  auto f = affine_forward(in, w, b);
  auto g = affine_backward(f.tape, w, up);
  auto loss = [&] { return detail::weighted_sum(affine_forward(in, w, b).output, up); };
  detail::Tracker t{{"affine", seed}, cfg};
  t.add(compare_gradient(in.values(), g.input.values(), loss, cfg), in.size());
  t.add(compare_gradient(w.values(), g.weight.values(), loss, cfg), w.size());
  t.add(compare_gradient(b, g.bias, loss, cfg), b.size());
  return t.finish();
}

inline GradCheckResult check_relu(std::uint64_t seed, const GradCheckConfig& cfg = {}) {
  Rng rng(seed);
  Matrix in = detail::random_matrix(6, 5, rng);
  for (double& v : in.values())
    while (std::abs(v) < cfg.kink_margin * 10) v = rng.normal();
  const Matrix up = detail::random_matrix(6, 5, rng);
  auto g = relu_backward(relu_forward(in).tape, up);
  auto loss = [&] { return detail::weighted_sum(relu_forward(in).output, up); };
  detail::Tracker t{{"relu", seed}, cfg};
  t.add(compare_gradient(in.values(), g.values(), loss, cfg), in.size());
  return t.finish();
}

inline GradCheckResult check_batchnorm(std::uint64_t seed, Mode mode,
                                       const GradCheckConfig& cfg = {}) {
  Rng rng(seed);
  Matrix in = detail::random_matrix(8, 4, rng, 2.0);
  Vector gamma = detail::random_vector(4, rng);
  Vector beta = detail::random_vector(4, rng);
  RunningStats base{detail::random_vector(4, rng), Vector(4)};
  for (double& v : base.var) v = rng.uniform(0.5, 2.0);
  const Matrix up = detail::random_matrix(8, 4, rng);
  auto run = [&] {
    RunningStats s = base;
    return batchnorm_forward(in, gamma, beta, mode, s);
  };
  auto f = run();
  auto g = batchnorm_backward(f.tape, gamma, up);
  auto loss = [&] { return detail::weighted_sum(run().output, up); };
  detail::Tracker t{{mode == Mode::train ? "batchnorm_train" : "batchnorm_eval", seed}, cfg};
  t.add(compare_gradient(in.values(), g.input.values(), loss, cfg), in.size());
  t.add(compare_gradient(gamma, g.gamma, loss, cfg), gamma.size());
  t.add(compare_gradient(beta, g.beta, loss, cfg), beta.size());
  return t.finish();
}

inline GradCheckResult check_dropout(std::uint64_t seed, const GradCheckConfig& cfg = {}) {
  Rng rng(seed);
  Matrix in = detail::random_matrix(6, 5, rng);
  const Matrix up = detail::random_matrix(6, 5, rng);
  const std::uint64_t mask_seed = rng.next_u64();
  auto run = [&] {
    Rng r(mask_seed);
    return dropout_forward(in, 0.5, Mode::train, r);
  };
  auto g = dropout_backward(run().tape, up);
  auto loss = [&] { return detail::weighted_sum(run().output, up); };
  detail::Tracker t{{"dropout", seed}, cfg};
  t.add(compare_gradient(in.values(), g.values(), loss, cfg), in.size());
  return t.finish();
}

inline GradCheckResult check_l2_normalize(std::uint64_t seed, const GradCheckConfig& cfg = {}) {
  Rng rng(seed);
  Matrix in = detail::random_matrix(5, 4, rng);
  const Matrix up = detail::random_matrix(5, 4, rng);
  auto g = l2_normalize_backward(l2_normalize_rows(in).tape, up);
  auto loss = [&] { return detail::weighted_sum(l2_normalize_rows(in).output, up); };
  detail::Tracker t{{"l2_normalize", seed}, cfg};
  t.add(compare_gradient(in.values(), g.values(), loss, cfg), in.size());
  return t.finish();
}

inline GradCheckResult check_pairwise_distance(std::uint64_t seed,
                                               const GradCheckConfig& cfg = {}) {
  Rng rng(seed);
  Matrix a = detail::random_matrix(4, 3, rng);
  Matrix b = detail::random_matrix(5, 3, rng);
  const Matrix up = detail::random_matrix(4, 5, rng);
  auto g = pairwise_distance_backward(a, b, pairwise_distances(a, b), up);
  auto loss = [&] { return detail::weighted_sum(pairwise_distances(a, b), up); };
  detail::Tracker t{{"pairwise_distance", seed}, cfg};
  t.add(compare_gradient(a.values(), g.a.values(), loss, cfg), a.size());
  t.add(compare_gradient(b.values(), g.b.values(), loss, cfg), b.size());
  return t.finish();
}

/// A small random batch for the end-to-end check: images 0..nx-1 each paired
/// with two sentences, so every family has triplets.
struct NetworkCheckProblem {
  NetworkParams params;
  Matrix in_x;
  Matrix in_y;
  BatchStructure structure;
  LossConfig loss;
};

inline NetworkCheckProblem make_network_problem(std::uint64_t seed) {
  Rng rng(seed);
  NetworkCheckProblem p;
  const BranchSpec sx{6, 5, 4, 0.5}, sy{7, 5, 4, 0.5};
  p.params = init_params(sx, sy, rng.next_u64());
  for (auto* b : {&p.params.x, &p.params.y}) {
    for (double& v : b->b1) v = 0.1 * rng.normal();
    for (double& v : b->b2) v = 0.1 * rng.normal();
    for (double& v : b->gamma) v = rng.uniform(0.5, 1.5);
    for (double& v : b->beta) v = 0.1 * rng.normal();
  }
  const std::size_t nx = 5, ny = 10;
  p.in_x = detail::random_matrix(nx, sx.input_dim, rng);
  p.in_y = detail::random_matrix(ny, sy.input_dim, rng);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < nx; ++i) {
    pairs.emplace_back(i, 2 * i);
    pairs.emplace_back(i, 2 * i + 1);
  }
  // one sentence shared by images 0 and 1 gives a nontrivial N(x)
  pairs.emplace_back(1, 0);
  p.structure = BatchStructure::from_pairs(nx, ny, pairs);
  p.loss.margin = 0.5;  // many active hinges at random init
  p.loss.lambda1 = 2.0;
  p.loss.lambda2 = 0.3;
  p.loss.lambda3 = 0.2;
  p.loss.top_k = 3;
  return p;
}

/// End-to-end: loss over triplets mined at the base point, through both
/// branches (dropout masks replayed from a fixed seed, batch norm in train
/// mode), against every parameter tensor. Points close to a ReLU kink, a
/// hinge kink or a zero distance are resampled.
inline GradCheckResult check_network(std::uint64_t seed, const GradCheckConfig& cfg = {}) {
  detail::Tracker t{{"network_loss", seed}, cfg};
  for (std::size_t attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    NetworkCheckProblem p = make_network_problem(seed * 7919 + attempt);
    const std::uint64_t drop_seed = seed ^ (0x9e3779b97f4a7c15ULL + attempt);
    const RunningStats rx = p.params.x.running, ry = p.params.y.running;

    struct Pass {
      Forward<BranchTape> fx, fy;
    };
    auto forward = [&] {
      Rng r(drop_seed);
      p.params.x.running = rx;
      p.params.y.running = ry;
      auto fx = forward_branch(p.params, Branch::x, p.in_x, Mode::train, r);
      auto fy = forward_branch(p.params, Branch::y, p.in_y, Mode::train, r);
      return Pass{std::move(fx), std::move(fy)};
    };

    Pass base = forward();
    bool near_kink = detail::min_abs(base.fx.tape.relu.input.values()) < cfg.kink_margin ||
                     detail::min_abs(base.fy.tape.relu.input.values()) < cfg.kink_margin;
    const TripletSet trip = mine_triplets(base.fx.output, base.fy.output, p.structure, p.loss);
    for (const auto& fam : trip.families)
      for (const Triplet& tr : fam)
        if (tr.violation < cfg.kink_margin) near_kink = true;
    const Matrix dxy = pairwise_distances(base.fx.output, base.fy.output);
    if (detail::min_abs(dxy.values()) < cfg.kink_margin) near_kink = true;
    if (near_kink || trip.total() == 0) continue;

    LossResult lr = hinge_loss(base.fx.output, base.fy.output, trip, p.loss);
    const BranchGrads gx = backward_branch(p.params, base.fx.tape, lr.grad_x);
    const BranchGrads gy = backward_branch(p.params, base.fy.tape, lr.grad_y);
    auto loss = [&] {
      Pass q = forward();
      return hinge_loss(q.fx.output, q.fy.output, trip, p.loss).loss();
    };
    for (auto [bp, g] : {std::pair{&p.params.x, &gx}, std::pair{&p.params.y, &gy}}) {
      t.add(compare_gradient(bp->w1.values(), g->w1.values(), loss, cfg), bp->w1.size());
      t.add(compare_gradient(bp->b1, g->b1, loss, cfg), bp->b1.size());
      t.add(compare_gradient(bp->w2.values(), g->w2.values(), loss, cfg), bp->w2.size());
      t.add(compare_gradient(bp->b2, g->b2, loss, cfg), bp->b2.size());
      t.add(compare_gradient(bp->gamma, g->gamma, loss, cfg), bp->gamma.size());
      t.add(compare_gradient(bp->beta, g->beta, loss, cfg), bp->beta.size());
    }
    return t.finish();
  }
  return t.finish();  // no admissible point: entries == 0, reported as a failure
}

/// Every check for every seed in [first_seed, first_seed + num_seeds).
inline std::vector<GradCheckResult> run_gradient_suite(std::uint64_t first_seed,
                                                       std::size_t num_seeds,
                                                       const GradCheckConfig& cfg = {}) {
  std::vector<GradCheckResult> out;
  for (std::uint64_t s = first_seed; s < first_seed + num_seeds; ++s) {
    out.push_back(check_affine(s, cfg));
    out.push_back(check_relu(s, cfg));
    out.push_back(check_batchnorm(s, Mode::train, cfg));
    out.push_back(check_batchnorm(s, Mode::eval, cfg));
    out.push_back(check_dropout(s, cfg));
    out.push_back(check_l2_normalize(s, cfg));
    out.push_back(check_pairwise_distance(s, cfg));
    out.push_back(check_network(s, cfg));
  }
  return out;
}

}  // namespace dspe
