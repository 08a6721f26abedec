#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

#include "dspe/error.hpp"
#include "dspe/layers.hpp"
#include "dspe/matrix.hpp"
#include "dspe/random.hpp"

namespace dspe {

/// Layer widths for one branch: input -> hidden -> embedding.
struct BranchSpec {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t embed_dim = 0;
  double dropout_p = 0.5;

  void validate(const char* name) const {
    if (input_dim < 1 || hidden_dim < 1 || embed_dim < 1) {
      throw ConfigError(std::string(name) + ": all branch dimensions must be >= 1");
    }
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
      throw ConfigError(std::string(name) + ": dropout probability must lie in [0, 1)");
    }
  }

  bool operator==(const BranchSpec&) const = default;
};

struct BranchParams {
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;
  Vector gamma;
  Vector beta;
  RunningStats running;

  bool operator==(const BranchParams& o) const {
    return w1 == o.w1 && b1 == o.b1 && w2 == o.w2 && b2 == o.b2 && gamma == o.gamma &&
           beta == o.beta && running.mean == o.running.mean && running.var == o.running.var;
  }
};

/// Parameters of the image (x) and text (y) branches.
struct NetworkParams {
  BranchSpec spec_x;
  BranchSpec spec_y;
  BranchParams x;
  BranchParams y;
  std::uint64_t seed = 0;

  bool operator==(const NetworkParams&) const = default;
};

enum class Branch { x, y };

inline const char* branch_name(Branch b) { return b == Branch::x ? "x" : "y"; }

inline BranchParams& branch_params(NetworkParams& p, Branch b) { return b == Branch::x ? p.x : p.y; }
inline const BranchParams& branch_params(const NetworkParams& p, Branch b) {
  return b == Branch::x ? p.x : p.y;
}
inline const BranchSpec& branch_spec(const NetworkParams& p, Branch b) {
  return b == Branch::x ? p.spec_x : p.spec_y;
}

namespace detail {

inline Matrix glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix w(fan_in, fan_out);
  for (double& v : w.values()) v = rng.uniform(-a, a);
  return w;
}

inline BranchParams init_branch(const BranchSpec& s, Rng& rng) {
  BranchParams p;
  p.w1 = glorot_uniform(s.input_dim, s.hidden_dim, rng);
  p.b1.assign(s.hidden_dim, 0.0);
  p.w2 = glorot_uniform(s.hidden_dim, s.embed_dim, rng);
  p.b2.assign(s.embed_dim, 0.0);
  p.gamma.assign(s.embed_dim, 1.0);
  p.beta.assign(s.embed_dim, 0.0);
  p.running.mean.assign(s.embed_dim, 0.0);
  p.running.var.assign(s.embed_dim, 1.0);
  return p;
}

}  // namespace detail

/// Glorot-uniform weights, zero biases, identity batch norm.
inline NetworkParams init_params(const BranchSpec& spec_x, const BranchSpec& spec_y,
                                 std::uint64_t seed) {
  spec_x.validate("image branch");
  spec_y.validate("text branch");
  if (spec_x.embed_dim != spec_y.embed_dim) {
    throw ConfigError("both branches must share the embedding dimension");
  }
  Rng rng(seed);
  NetworkParams p;
  p.spec_x = spec_x;
  p.spec_y = spec_y;
  p.seed = seed;
  p.x = detail::init_branch(spec_x, rng);
  p.y = detail::init_branch(spec_y, rng);
  return p;
}

/// Everything backward needs from one branch forward pass.
struct BranchTape {
  Branch branch = Branch::x;
  Mode mode = Mode::eval;
  AffineTape affine1;
  ReluTape relu;
  DropoutTape dropout;
  AffineTape affine2;
  BatchNormTape batchnorm;
  L2NormTape l2;
  bool consumed = false;
};

namespace detail {

inline Forward<BranchTape> run_branch(const BranchSpec& spec, const BranchParams& p,
                                      RunningStats& stats, Branch branch, const Matrix& input,
                                      Mode mode, Rng& rng) {
  if (input.cols() != spec.input_dim) {
    throw DimensionError(std::string("branch ") + branch_name(branch) + " expects " +
                         std::to_string(spec.input_dim) + " input features, got " +
                         std::to_string(input.cols()));
  }
  BranchTape tape;
  tape.branch = branch;
  tape.mode = mode;
  auto a1 = affine_forward(input, p.w1, p.b1);
  tape.affine1 = std::move(a1.tape);
  auto r = relu_forward(a1.output);
  tape.relu = std::move(r.tape);
  auto dr = dropout_forward(r.output, spec.dropout_p, mode, rng);
  tape.dropout = std::move(dr.tape);
  auto a2 = affine_forward(dr.output, p.w2, p.b2);
  tape.affine2 = std::move(a2.tape);
  auto bn = batchnorm_forward(a2.output, p.gamma, p.beta, mode, stats);
  tape.batchnorm = std::move(bn.tape);
  auto l2 = l2_normalize_rows(bn.output);
  tape.l2 = std::move(l2.tape);
  return {std::move(l2.output), std::move(tape)};
}

}  // namespace detail

/// affine -> ReLU -> dropout -> affine -> batch norm -> L2 normalize.
/// Train mode updates the branch's running batch-norm statistics.
inline Forward<BranchTape> forward_branch(NetworkParams& params, Branch branch,
                                          const Matrix& input, Mode mode, Rng& rng) {
  BranchParams& p = branch_params(params, branch);
  return detail::run_branch(branch_spec(params, branch), p, p.running, branch, input, mode, rng);
}

/// Eval-mode embedding; leaves the parameters untouched.
inline Matrix embed(const NetworkParams& params, Branch branch, const Matrix& input) {
  const BranchParams& p = branch_params(params, branch);
  RunningStats stats = p.running;
  Rng unused(0);
  return detail::run_branch(branch_spec(params, branch), p, stats, branch, input, Mode::eval,
                            unused)
      .output;
}

/// Gradients of one branch, mirroring BranchParams.
struct BranchGrads {
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;
  Vector gamma;
  Vector beta;
};

inline BranchGrads zero_grads_like(const BranchParams& p) {
  return {Matrix(p.w1.rows(), p.w1.cols()), Vector(p.b1.size(), 0.0),
          Matrix(p.w2.rows(), p.w2.cols()), Vector(p.b2.size(), 0.0),
          Vector(p.gamma.size(), 0.0),      Vector(p.beta.size(), 0.0)};
}

/// Backpropagates embedding gradients through one branch. A tape can be
/// consumed once, and only if it came from a train-mode forward.
inline BranchGrads backward_branch(const NetworkParams& params, BranchTape& tape,
                                   const Matrix& grad_embeddings) {
  if (tape.consumed) throw ContractViolation("branch tape already consumed by a backward pass");
  if (tape.mode != Mode::train) throw ContractViolation("backward requires a train-mode tape");
  tape.consumed = true;
  const BranchParams& p = branch_params(params, tape.branch);
  BranchGrads g;
  Matrix d = l2_normalize_backward(tape.l2, grad_embeddings);
  auto bn = batchnorm_backward(tape.batchnorm, p.gamma, d);
  g.gamma = std::move(bn.gamma);
  g.beta = std::move(bn.beta);
  auto a2 = affine_backward(tape.affine2, p.w2, bn.input);
  g.w2 = std::move(a2.weight);
  g.b2 = std::move(a2.bias);
  d = dropout_backward(tape.dropout, a2.input);
  d = relu_backward(tape.relu, d);
  auto a1 = affine_backward(tape.affine1, p.w1, d);
  g.w1 = std::move(a1.weight);
  g.b1 = std::move(a1.bias);
  return g;
}

}  // namespace dspe
