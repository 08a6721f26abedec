#pragma once

// Differentiable layer primitives. Each forward returns its output together
// with the tape its backward needs; backward functions are pure.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "dspe/error.hpp"
#include "dspe/matrix.hpp"
#include "dspe/random.hpp"

namespace dspe {

enum class Mode { train, eval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kNormEps = 1e-12;
inline constexpr double kDistEps = 1e-12;

template <typename Tape>
struct Forward {
  Matrix output;
  Tape tape;
};

// ---------------------------------------------------------------- affine

struct AffineTape {
  Matrix input;
};

struct AffineGrads {
  Matrix input;
  Matrix weight;
  Vector bias;
};

inline Forward<AffineTape> affine_forward(const Matrix& input, const Matrix& weight,
                                          std::span<const double> bias) {
  if (input.cols() != weight.rows()) {
    throw DimensionError("affine: input has " + std::to_string(input.cols()) +
                         " columns, weight expects " + std::to_string(weight.rows()));
  }
  if (bias.size() != weight.cols()) {
    throw DimensionError("affine: bias length " + std::to_string(bias.size()) +
                         " does not match output width " + std::to_string(weight.cols()));
  }
  Matrix out = matmul(input, weight);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
  return {std::move(out), AffineTape{input}};
}

inline AffineGrads affine_backward(const AffineTape& tape, const Matrix& weight,
                                   const Matrix& grad_out) {
  if (grad_out.rows() != tape.input.rows() || grad_out.cols() != weight.cols()) {
    throw DimensionError("affine_backward: upstream gradient shape mismatch");
  }
  AffineGrads g;
  g.input = matmul_nt(grad_out, weight);
  g.weight = matmul_tn(tape.input, grad_out);
  g.bias.assign(weight.cols(), 0.0);
  for (std::size_t i = 0; i < grad_out.rows(); ++i) {
    auto r = grad_out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) g.bias[j] += r[j];
  }
  return g;
}

// ---------------------------------------------------------------- relu

struct ReluTape {
  Matrix input;
};

inline Forward<ReluTape> relu_forward(const Matrix& input) {
  Matrix out = input;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return {std::move(out), ReluTape{input}};
}

/// Subgradient at exactly zero is zero.
inline Matrix relu_backward(const ReluTape& tape, const Matrix& grad_out) {
  require_same_shape(tape.input, grad_out, "relu_backward");
  Matrix g = grad_out;
  auto in = tape.input.values();
  auto gv = g.values();
  for (std::size_t i = 0; i < gv.size(); ++i)
    if (!(in[i] > 0.0)) gv[i] = 0.0;
  return g;
}

// ---------------------------------------------------------------- batch norm

struct RunningStats {
  Vector mean;
  Vector var;
};

struct BatchNormTape {
  Mode mode = Mode::eval;
  Matrix normalized;  // x-hat
  Vector inv_std;
};

struct BatchNormGrads {
  Matrix input;
  Vector gamma;
  Vector beta;
};

/// Train mode standardizes each column with the biased batch variance and
/// folds the batch statistics into `stats`; eval mode uses `stats` as is.
inline Forward<BatchNormTape> batchnorm_forward(const Matrix& input, std::span<const double> gamma,
                                                std::span<const double> beta, Mode mode,
                                                RunningStats& stats,
                                                double momentum = kBatchNormMomentum,
                                                double eps = kBatchNormEps) {
  const std::size_t n = input.rows();
  const std::size_t d = input.cols();
  if (gamma.size() != d || beta.size() != d || stats.mean.size() != d || stats.var.size() != d) {
    throw DimensionError("batchnorm: parameter length does not match input width " +
                         std::to_string(d));
  }
  Vector mean(d, 0.0);
  Vector var(d, 0.0);
  if (mode == Mode::train) {
    if (n < 2) {
      throw BatchTooSmallError("batchnorm: training needs at least 2 rows, got " +
                               std::to_string(n));
    }
    for (std::size_t i = 0; i < n; ++i) {
      auto r = input.row(i);
      for (std::size_t j = 0; j < d; ++j) mean[j] += r[j];
    }
    for (double& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      auto r = input.row(i);
      for (std::size_t j = 0; j < d; ++j) {
        const double c = r[j] - mean[j];
        var[j] += c * c;
      }
    }
    for (double& v : var) v /= static_cast<double>(n);
    for (std::size_t j = 0; j < d; ++j) {
      stats.mean[j] = (1.0 - momentum) * stats.mean[j] + momentum * mean[j];
      stats.var[j] = (1.0 - momentum) * stats.var[j] + momentum * var[j];
    }
  } else {
    mean = stats.mean;
    var = stats.var;
  }

  BatchNormTape tape;
  tape.mode = mode;
  tape.inv_std.resize(d);
  for (std::size_t j = 0; j < d; ++j) tape.inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  tape.normalized = Matrix(n, d);
  Matrix out(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = input.row(i);
    auto xh = tape.normalized.row(i);
    auto o = out.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      xh[j] = (r[j] - mean[j]) * tape.inv_std[j];
      o[j] = gamma[j] * xh[j] + beta[j];
    }
  }
  return {std::move(out), std::move(tape)};
}

inline BatchNormGrads batchnorm_backward(const BatchNormTape& tape, std::span<const double> gamma,
                                         const Matrix& grad_out) {
  require_same_shape(tape.normalized, grad_out, "batchnorm_backward");
  const std::size_t n = grad_out.rows();
  const std::size_t d = grad_out.cols();
  BatchNormGrads g;
  g.gamma.assign(d, 0.0);
  g.beta.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto go = grad_out.row(i);
    auto xh = tape.normalized.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      g.beta[j] += go[j];
      g.gamma[j] += go[j] * xh[j];
    }
  }
  g.input = Matrix(n, d);
  if (tape.mode == Mode::eval) {
    for (std::size_t i = 0; i < n; ++i) {
      auto go = grad_out.row(i);
      auto gi = g.input.row(i);
      for (std::size_t j = 0; j < d; ++j) gi[j] = go[j] * gamma[j] * tape.inv_std[j];
    }
    return g;
  }
  // dx = inv_std / n * (n * dxh - sum(dxh) - xh * sum(dxh * xh)), dxh = go * gamma
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto go = grad_out.row(i);
    auto xh = tape.normalized.row(i);
    auto gi = g.input.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      const double dxh = go[j] * gamma[j];
      gi[j] = tape.inv_std[j] * inv_n *
              (static_cast<double>(n) * dxh - gamma[j] * g.beta[j] - xh[j] * gamma[j] * g.gamma[j]);
    }
  }
  return g;
}

// ---------------------------------------------------------------- dropout

struct DropoutTape {
  Vector mask;  // empty when the layer acted as identity
};

/// Inverted dropout: survivors are scaled by 1/(1-p) at train time.
inline Forward<DropoutTape> dropout_forward(const Matrix& input, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  }
  if (mode == Mode::eval || p == 0.0) return {input, DropoutTape{}};
  const double keep_scale = 1.0 / (1.0 - p);
  DropoutTape tape;
  tape.mask.resize(input.size());
  Matrix out = input;
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    tape.mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
    ov[i] *= tape.mask[i];
  }
  return {std::move(out), std::move(tape)};
}

inline Matrix dropout_backward(const DropoutTape& tape, const Matrix& grad_out) {
  if (tape.mask.empty()) return grad_out;
  if (tape.mask.size() != grad_out.size()) throw DimensionError("dropout_backward: shape mismatch");
  Matrix g = grad_out;
  auto gv = g.values();
  for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= tape.mask[i];
  return g;
}

// ---------------------------------------------------------------- L2 normalization

struct L2NormTape {
  Matrix output;
  Vector norms;  // max(||row||, eps)
};

inline Forward<L2NormTape> l2_normalize_rows(const Matrix& input, double eps = kNormEps) {
  Matrix out(input.rows(), input.cols());
  Vector norms(input.rows());
  for (std::size_t i = 0; i < input.rows(); ++i) {
    auto r = input.row(i);
    norms[i] = std::max(std::sqrt(squared_norm(r)), eps);
    auto o = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) o[j] = r[j] / norms[i];
  }
  return {out, L2NormTape{out, std::move(norms)}};
}

/// Rows above eps: (g - (g.u)u) / ||v||. Rows clamped at eps: g / eps.
inline Matrix l2_normalize_backward(const L2NormTape& tape, const Matrix& grad_out,
                                    double eps = kNormEps) {
  require_same_shape(tape.output, grad_out, "l2_normalize_backward");
  Matrix g(grad_out.rows(), grad_out.cols());
  for (std::size_t i = 0; i < g.rows(); ++i) {
    auto go = grad_out.row(i);
    auto u = tape.output.row(i);
    auto gi = g.row(i);
    const double inv = 1.0 / tape.norms[i];
    if (tape.norms[i] <= eps) {
      for (std::size_t j = 0; j < gi.size(); ++j) gi[j] = go[j] * inv;
      continue;
    }
    double dot = 0.0;
    for (std::size_t j = 0; j < gi.size(); ++j) dot += go[j] * u[j];
    for (std::size_t j = 0; j < gi.size(); ++j) gi[j] = (go[j] - dot * u[j]) * inv;
  }
  return g;
}

// ---------------------------------------------------------------- distances

/// D[i,j] = ||A_i - B_j||. Summed over explicit differences, so entries are
/// never negative. Row blocks may be split across `threads` workers; every
/// entry is computed independently, so results do not depend on the split.
inline Matrix pairwise_distances(const Matrix& a, const Matrix& b, unsigned threads = 1) {
  if (a.cols() != b.cols()) {
    throw DimensionError("pairwise_distances: dimensions " + std::to_string(a.cols()) + " and " +
                         std::to_string(b.cols()) + " differ");
  }
  Matrix d(a.rows(), b.rows());
  auto fill_rows = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      auto ar = a.row(i);
      for (std::size_t j = 0; j < b.rows(); ++j) {
        auto br = b.row(j);
        double s = 0.0;
        for (std::size_t k = 0; k < ar.size(); ++k) {
          const double diff = ar[k] - br[k];
          s += diff * diff;
        }
        d(i, j) = std::sqrt(s);
      }
    }
  };
  if (threads <= 1 || a.rows() < 2 * threads) {
    fill_rows(0, a.rows());
    return d;
  }
  std::vector<std::thread> workers;
  const std::size_t chunk = (a.rows() + threads - 1) / threads;
  for (std::size_t lo = 0; lo < a.rows(); lo += chunk) {
    workers.emplace_back(fill_rows, lo, std::min(a.rows(), lo + chunk));
  }
  for (auto& w : workers) w.join();
  return d;
}

struct DistanceGrads {
  Matrix a;
  Matrix b;
};

/// Chain rule through pairwise_distances for upstream G (same shape as D).
/// Pairs with D below eps contribute nothing.
inline DistanceGrads pairwise_distance_backward(const Matrix& a, const Matrix& b, const Matrix& d,
                                                const Matrix& upstream, double eps = kDistEps) {
  if (a.cols() != b.cols() || d.rows() != a.rows() || d.cols() != b.rows()) {
    throw DimensionError("pairwise_distance_backward: shape mismatch");
  }
  require_same_shape(d, upstream, "pairwise_distance_backward");
  DistanceGrads g{Matrix(a.rows(), a.cols()), Matrix(b.rows(), b.cols())};
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ar = a.row(i);
    auto ga = g.a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double gij = upstream(i, j);
      if (gij == 0.0) continue;
      const double dist = d(i, j);
      if (dist <= eps) continue;
      const double coef = gij / std::max(dist, eps);
      auto br = b.row(j);
      auto gb = g.b.row(j);
      for (std::size_t k = 0; k < ar.size(); ++k) {
        const double t = coef * (ar[k] - br[k]);
        ga[k] += t;
        gb[k] -= t;
      }
    }
  }
  return g;
}

}  // namespace dspe
