#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "dspe/error.hpp"
#include "dspe/network.hpp"

namespace dspe {

struct SgdConfig {
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double decay_factor = 0.1;
  std::size_t decay_every = 10;  // epochs

  void validate() const {
    if (!(lr0 > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be nonnegative");
    if (!(decay_factor > 0.0 && decay_factor <= 1.0))
      throw ConfigError("learning-rate decay factor must lie in (0, 1]");
    if (decay_every < 1) throw ConfigError("learning-rate decay interval must be >= 1 epoch");
  }
};

/// Step decay: lr0 * factor^floor(epoch / decay_every).
inline double lr_schedule(std::size_t epoch, const SgdConfig& cfg = {}) {
  return cfg.lr0 * std::pow(cfg.decay_factor, static_cast<double>(epoch / cfg.decay_every));
}

/// One momentum step for a flat parameter block:
///   v <- momentum * v + (grad + wd * theta);  theta <- theta - lr * v
inline void sgd_update(std::span<double> theta, std::span<const double> grad,
                       std::span<double> velocity, double lr, double momentum,
                       double weight_decay) {
  if (theta.size() != grad.size() || theta.size() != velocity.size()) {
    throw DimensionError("sgd_update: parameter, gradient and velocity sizes differ");
  }
  for (std::size_t i = 0; i < theta.size(); ++i) {
    velocity[i] = momentum * velocity[i] + (grad[i] + weight_decay * theta[i]);
    theta[i] -= lr * velocity[i];
  }
}

struct OptimizerState {
  SgdConfig cfg;
  double lr = 0.1;
  std::size_t epoch = 0;
  std::size_t step = 0;
  BranchGrads velocity_x;
  BranchGrads velocity_y;

  /// Sets the learning rate for `epoch` from the schedule.
  void begin_epoch(std::size_t e) {
    epoch = e;
    lr = lr_schedule(e, cfg);
  }
};

inline OptimizerState make_optimizer(const NetworkParams& params, const SgdConfig& cfg = {}) {
  cfg.validate();
  OptimizerState s;
  s.cfg = cfg;
  s.lr = lr_schedule(0, cfg);
  s.velocity_x = zero_grads_like(params.x);
  s.velocity_y = zero_grads_like(params.y);
  return s;
}

struct GradNormReport {
  double x = 0.0;
  double y = 0.0;
};

inline double grad_norm(const BranchGrads& g) {
  double s = squared_norm(g.w1.values()) + squared_norm(g.b1) + squared_norm(g.w2.values()) +
             squared_norm(g.b2) + squared_norm(g.gamma) + squared_norm(g.beta);
  return std::sqrt(s);
}

/// Weight decay applies to the affine weights only.
inline void apply_sgd(BranchParams& p, const BranchGrads& g, BranchGrads& v,
                      const OptimizerState& opt) {
  const double lr = opt.lr;
  const double mu = opt.cfg.momentum;
  const double wd = opt.cfg.weight_decay;
  sgd_update(p.w1.values(), g.w1.values(), v.w1.values(), lr, mu, wd);
  sgd_update(p.b1, g.b1, v.b1, lr, mu, 0.0);
  sgd_update(p.w2.values(), g.w2.values(), v.w2.values(), lr, mu, wd);
  sgd_update(p.b2, g.b2, v.b2, lr, mu, 0.0);
  sgd_update(p.gamma, g.gamma, v.gamma, lr, mu, 0.0);
  sgd_update(p.beta, g.beta, v.beta, lr, mu, 0.0);
}

/// Backpropagates both branches from their embedding gradients and takes
/// one SGD step.
inline GradNormReport backward_and_step(NetworkParams& params, OptimizerState& opt,
                                        BranchTape& tape_x, BranchTape& tape_y,
                                        const Matrix& grad_x, const Matrix& grad_y) {
  if (tape_x.branch != Branch::x || tape_y.branch != Branch::y) {
    throw ContractViolation("backward_and_step: tapes passed for the wrong branches");
  }
  BranchGrads gx = backward_branch(params, tape_x, grad_x);
  BranchGrads gy = backward_branch(params, tape_y, grad_y);
  apply_sgd(params.x, gx, opt.velocity_x, opt);
  apply_sgd(params.y, gy, opt.velocity_y, opt);
  ++opt.step;
  return {grad_norm(gx), grad_norm(gy)};
}

}  // namespace dspe
