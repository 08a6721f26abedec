#pragma once

// Bi-directional ranking + structure-preserving hinge loss with in-batch
// top-K triplet mining.
//
// Families (anchor, positive, negative):
//   image_to_sentence   x_i, y_j in Y+(x_i),        y_k outside Y+(x_i) and N(y_j)
//   sentence_to_image   y_i, x_j in X+(y_i),        x_k outside X+(y_i) and N(x_j)
//   image_structure     x_i, x_j in N(x_i), j != i, x_k outside N(x_i)
//   sentence_structure  y_i, y_j in N(y_i), j != i, y_k outside N(y_i)
// Loss = F1 + lambda1 F2 + lambda2 F3 + lambda3 F4, each a sum of
// max(0, m + d(a,p) - d(a,n)).

#include <algorithm>
#include <array>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "dspe/error.hpp"
#include "dspe/layers.hpp"
#include "dspe/matrix.hpp"

namespace dspe {

struct LossConfig {
  double margin = 0.1;
  double lambda1 = 2.0;
  double lambda2 = 0.0;
  double lambda3 = 0.2;
  std::size_t top_k = 50;

  void validate() const {
    if (!(margin > 0.0)) throw ConfigError("margin must be positive");
    if (!(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda3 >= 0.0))
      throw ConfigError("loss weights must be nonnegative");
    if (top_k < 1) throw ConfigError("top_k must be >= 1");
  }

  /// Weight of each family in the order of Family.
  std::array<double, 4> weights() const { return {1.0, lambda1, lambda2, lambda3}; }
};

enum class Family : std::size_t {
  image_to_sentence = 0,
  sentence_to_image = 1,
  image_structure = 2,
  sentence_structure = 3,
};

inline constexpr std::array<Family, 4> kFamilies = {
    Family::image_to_sentence, Family::sentence_to_image, Family::image_structure,
    Family::sentence_structure};

inline const char* family_name(Family f) {
  switch (f) {
    case Family::image_to_sentence: return "image_to_sentence";
    case Family::sentence_to_image: return "sentence_to_image";
    case Family::image_structure: return "image_structure";
    case Family::sentence_structure: return "sentence_structure";
  }
  return "?";
}

/// Batch-local indices. `violation` is the hinge value at mining time.
struct Triplet {
  std::size_t anchor;
  std::size_t positive;
  std::size_t negative;
  double violation;

  bool operator==(const Triplet&) const = default;
};

struct TripletSet {
  std::array<std::vector<Triplet>, 4> families;

  std::vector<Triplet>& operator[](Family f) { return families[static_cast<std::size_t>(f)]; }
  const std::vector<Triplet>& operator[](Family f) const {
    return families[static_cast<std::size_t>(f)];
  }
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& f : families) n += f.size();
    return n;
  }
};

/// Correspondence structure of one mini-batch in batch-local indices.
///
/// Rows registered through add_hard_negative() are negative-only region rows
/// (mined hard negatives): they never anchor, are never positives, and serve
/// as sentence_to_image negatives only against the y anchors they were
/// registered for.
class BatchStructure {
 public:
  BatchStructure() = default;

  /// Builds from positive (x, y) pairs; neighborhoods are the depth-1
  /// shared-partner closure (x' in N(x) iff some y is positive for both).
  static BatchStructure from_pairs(std::size_t num_x, std::size_t num_y,
                                   const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
    BatchStructure s;
    s.nx_ = num_x;
    s.ny_ = num_y;
    s.positive_.assign(num_x * num_y, 0);
    s.same_x_.assign(num_x * num_x, 0);
    s.same_y_.assign(num_y * num_y, 0);
    s.restricted_.assign(num_x, 0);
    s.hard_.assign(num_x * num_y, 0);
    for (auto [x, y] : pairs) {
      if (x >= num_x || y >= num_y) throw ConsistencyError("batch pair index out of range");
      s.positive_[x * num_y + y] = 1;
    }
    for (std::size_t i = 0; i < num_x; ++i) s.same_x_[i * num_x + i] = 1;
    for (std::size_t i = 0; i < num_y; ++i) s.same_y_[i * num_y + i] = 1;
    for (std::size_t y = 0; y < num_y; ++y) {
      for (std::size_t a = 0; a < num_x; ++a) {
        if (!s.positive_[a * num_y + y]) continue;
        for (std::size_t b = 0; b < num_x; ++b)
          if (s.positive_[b * num_y + y]) s.same_x_[a * num_x + b] = 1;
      }
    }
    for (std::size_t x = 0; x < num_x; ++x) {
      for (std::size_t a = 0; a < num_y; ++a) {
        if (!s.positive_[x * num_y + a]) continue;
        for (std::size_t b = 0; b < num_y; ++b)
          if (s.positive_[x * num_y + b]) s.same_y_[a * num_y + b] = 1;
      }
    }
    return s;
  }

  /// Declares two x rows (resp. y rows) as same-meaning neighbors, e.g.
  /// because they share a partner outside the batch.
  void link_x(std::size_t a, std::size_t b) {
    if (a >= nx_ || b >= nx_) throw ConsistencyError("neighbor index out of range");
    same_x_[a * nx_ + b] = same_x_[b * nx_ + a] = 1;
  }
  void link_y(std::size_t a, std::size_t b) {
    if (a >= ny_ || b >= ny_) throw ConsistencyError("neighbor index out of range");
    same_y_[a * ny_ + b] = same_y_[b * ny_ + a] = 1;
  }

  /// Marks x as a negative-only row usable against anchor y.
  void add_hard_negative(std::size_t x, std::size_t y) {
    if (x >= nx_ || y >= ny_) throw ConsistencyError("hard negative index out of range");
    for (std::size_t j = 0; j < ny_; ++j)
      if (positive_[x * ny_ + j]) throw ConsistencyError("hard negative row has a positive pair");
    for (std::size_t i = 0; i < nx_; ++i)
      if (i != x && same_x_[x * nx_ + i]) throw ConsistencyError("hard negative row has neighbors");
    restricted_[x] = 1;
    hard_[x * ny_ + y] = 1;
  }

  std::size_t num_x() const { return nx_; }
  std::size_t num_y() const { return ny_; }
  bool positive(std::size_t x, std::size_t y) const { return positive_[x * ny_ + y] != 0; }
  bool same_x(std::size_t a, std::size_t b) const { return same_x_[a * nx_ + b] != 0; }
  bool same_y(std::size_t a, std::size_t b) const { return same_y_[a * ny_ + b] != 0; }
  bool restricted(std::size_t x) const { return restricted_[x] != 0; }
  bool hard_negative_for(std::size_t x, std::size_t y) const { return hard_[x * ny_ + y] != 0; }

 private:
  std::size_t nx_ = 0;
  std::size_t ny_ = 0;
  std::vector<char> positive_;
  std::vector<char> same_x_;
  std::vector<char> same_y_;
  std::vector<char> restricted_;
  std::vector<char> hard_;
};

namespace detail {

struct Candidate {
  double violation;
  std::size_t negative;
};

/// Keeps the top_k largest violations; ties go to the lower negative index.
inline void emit_top_k(std::vector<Candidate>& cands, std::size_t anchor, std::size_t positive,
                       std::size_t top_k, std::vector<Triplet>& out) {
  auto better = [](const Candidate& a, const Candidate& b) {
    if (a.violation != b.violation) return a.violation > b.violation;
    return a.negative < b.negative;
  };
  const std::size_t keep = std::min(top_k, cands.size());
  std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                    better);
  for (std::size_t i = 0; i < keep; ++i)
    out.push_back({anchor, positive, cands[i].negative, cands[i].violation});
}

inline void check_batch_shapes(const Matrix& emb_x, const Matrix& emb_y,
                               const BatchStructure& s) {
  if (emb_x.rows() != s.num_x() || emb_y.rows() != s.num_y()) {
    throw DimensionError("embeddings are not row-aligned with the batch structure");
  }
  if (emb_x.cols() != emb_y.cols()) throw DimensionError("embedding widths differ");
}

}  // namespace detail

/// Mines, for every positive pair of every family with nonzero weight, the
/// top_k in-batch negatives with strictly positive hinge violation.
inline TripletSet mine_triplets(const Matrix& emb_x, const Matrix& emb_y,
                                const BatchStructure& s, const LossConfig& cfg) {
  cfg.validate();
  detail::check_batch_shapes(emb_x, emb_y, s);
  const auto w = cfg.weights();
  const double m = cfg.margin;
  const std::size_t nx = s.num_x();
  const std::size_t ny = s.num_y();
  TripletSet out;
  std::vector<detail::Candidate> cands;

  const bool need_xy = w[0] > 0.0 || w[1] > 0.0;
  const Matrix dxy = need_xy ? pairwise_distances(emb_x, emb_y) : Matrix();

  if (w[0] > 0.0) {
    auto& fam = out[Family::image_to_sentence];
    for (std::size_t i = 0; i < nx; ++i) {
      if (s.restricted(i)) continue;
      for (std::size_t j = 0; j < ny; ++j) {
        if (!s.positive(i, j)) continue;
        cands.clear();
        for (std::size_t k = 0; k < ny; ++k) {
          if (s.positive(i, k) || s.same_y(j, k)) continue;
          const double v = m + dxy(i, j) - dxy(i, k);
          if (v > 0.0) cands.push_back({v, k});
        }
        detail::emit_top_k(cands, i, j, cfg.top_k, fam);
      }
    }
  }

  if (w[1] > 0.0) {
    auto& fam = out[Family::sentence_to_image];
    for (std::size_t i = 0; i < ny; ++i) {
      for (std::size_t j = 0; j < nx; ++j) {
        if (s.restricted(j) || !s.positive(j, i)) continue;
        cands.clear();
        for (std::size_t k = 0; k < nx; ++k) {
          const bool eligible = s.restricted(k) ? s.hard_negative_for(k, i)
                                                : !s.positive(k, i) && !s.same_x(j, k);
          if (!eligible) continue;
          const double v = m + dxy(j, i) - dxy(k, i);
          if (v > 0.0) cands.push_back({v, k});
        }
        detail::emit_top_k(cands, i, j, cfg.top_k, fam);
      }
    }
  }

  if (w[2] > 0.0) {
    const Matrix dxx = pairwise_distances(emb_x, emb_x);
    auto& fam = out[Family::image_structure];
    for (std::size_t i = 0; i < nx; ++i) {
      if (s.restricted(i)) continue;
      for (std::size_t j = 0; j < nx; ++j) {
        if (j == i || !s.same_x(i, j)) continue;
        cands.clear();
        for (std::size_t k = 0; k < nx; ++k) {
          if (s.restricted(k) || s.same_x(i, k)) continue;
          const double v = m + dxx(i, j) - dxx(i, k);
          if (v > 0.0) cands.push_back({v, k});
        }
        detail::emit_top_k(cands, i, j, cfg.top_k, fam);
      }
    }
  }

  if (w[3] > 0.0) {
    const Matrix dyy = pairwise_distances(emb_y, emb_y);
    auto& fam = out[Family::sentence_structure];
    for (std::size_t i = 0; i < ny; ++i) {
      for (std::size_t j = 0; j < ny; ++j) {
        if (j == i || !s.same_y(i, j)) continue;
        cands.clear();
        for (std::size_t k = 0; k < ny; ++k) {
          if (s.same_y(i, k)) continue;
          const double v = m + dyy(i, j) - dyy(i, k);
          if (v > 0.0) cands.push_back({v, k});
        }
        detail::emit_top_k(cands, i, j, cfg.top_k, fam);
      }
    }
  }
  return out;
}

/// Unweighted per-family hinge sums and the weighted total.
struct LossTerms {
  std::array<double, 4> sums{};
  double total = 0.0;

  double operator[](Family f) const { return sums[static_cast<std::size_t>(f)]; }
};

struct LossResult {
  LossTerms terms;
  Matrix grad_x;
  Matrix grad_y;

  double loss() const { return terms.total; }
};

/// Evaluates the weighted hinge loss over the given triplets at the current
/// embeddings and its gradient with respect to both embedding matrices.
inline LossResult hinge_loss(const Matrix& emb_x, const Matrix& emb_y, const TripletSet& triplets,
                             const LossConfig& cfg) {
  if (emb_x.cols() != emb_y.cols()) throw DimensionError("embedding widths differ");
  const auto w = cfg.weights();
  const double m = cfg.margin;
  LossResult r{{}, Matrix(emb_x.rows(), emb_x.cols()), Matrix(emb_y.rows(), emb_y.cols())};

  auto check = [](const Triplet& t, std::size_t na, std::size_t np) {
    if (t.anchor >= na || t.positive >= np || t.negative >= np)
      throw DimensionError("triplet index out of range");
  };

  const auto& f1 = triplets[Family::image_to_sentence];
  const auto& f2 = triplets[Family::sentence_to_image];
  if (!f1.empty() || !f2.empty()) {
    const Matrix d = pairwise_distances(emb_x, emb_y);
    Matrix g(d.rows(), d.cols());
    for (const Triplet& t : f1) {
      check(t, emb_x.rows(), emb_y.rows());
      const double h = m + d(t.anchor, t.positive) - d(t.anchor, t.negative);
      if (h <= 0.0) continue;
      r.terms.sums[0] += h;
      g(t.anchor, t.positive) += w[0];
      g(t.anchor, t.negative) -= w[0];
    }
    for (const Triplet& t : f2) {
      check(t, emb_y.rows(), emb_x.rows());
      const double h = m + d(t.positive, t.anchor) - d(t.negative, t.anchor);
      if (h <= 0.0) continue;
      r.terms.sums[1] += h;
      g(t.positive, t.anchor) += w[1];
      g(t.negative, t.anchor) -= w[1];
    }
    auto gd = pairwise_distance_backward(emb_x, emb_y, d, g);
    r.grad_x = std::move(gd.a);
    r.grad_y = std::move(gd.b);
  }

  auto within_view = [&](const Matrix& e, const std::vector<Triplet>& fam, std::size_t slot,
                         Matrix& grad) {
    if (fam.empty()) return;
    const Matrix d = pairwise_distances(e, e);
    Matrix g(d.rows(), d.cols());
    for (const Triplet& t : fam) {
      check(t, e.rows(), e.rows());
      const double h = m + d(t.anchor, t.positive) - d(t.anchor, t.negative);
      if (h <= 0.0) continue;
      r.terms.sums[slot] += h;
      g(t.anchor, t.positive) += w[slot];
      g(t.anchor, t.negative) -= w[slot];
    }
    auto gd = pairwise_distance_backward(e, e, d, g);
    auto gv = grad.values();
    auto ga = gd.a.values();
    auto gb = gd.b.values();
    for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += ga[i] + gb[i];
  };
  within_view(emb_x, triplets[Family::image_structure], 2, r.grad_x);
  within_view(emb_y, triplets[Family::sentence_structure], 3, r.grad_y);

  for (std::size_t f = 0; f < 4; ++f) r.terms.total += w[f] * r.terms.sums[f];
  return r;
}

}  // namespace dspe
