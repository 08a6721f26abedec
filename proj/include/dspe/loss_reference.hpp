#pragma once

// Exhaustive reference for the mined hinge loss. Distances are recomputed per
// pair with a plain loop and every eligible triplet is enumerated, so this
// path shares no code with mine_triplets / hinge_loss beyond BatchStructure.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <utility>
#include <vector>

#include "dspe/loss.hpp"
#include "dspe/matrix.hpp"

namespace dspe::reference {

inline double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

/// (violation, negative) lists keyed by (anchor, positive), sorted by
/// descending violation then ascending negative index.
using ViolationTable =
    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::pair<double, std::size_t>>>;

/// Enumerates every strictly positive violation of one family.
inline ViolationTable enumerate_violations(const Matrix& ex, const Matrix& ey,
                                           const BatchStructure& s, double margin, Family family) {
  ViolationTable table;
  const std::size_t nx = s.num_x();
  const std::size_t ny = s.num_y();
  auto add = [&](std::size_t a, std::size_t p, std::size_t n, double v) {
    if (v > 0.0) table[{a, p}].emplace_back(v, n);
  };
  switch (family) {
    case Family::image_to_sentence:
      for (std::size_t i = 0; i < nx; ++i)
        for (std::size_t j = 0; j < ny; ++j)
          for (std::size_t k = 0; k < ny; ++k) {
            if (s.restricted(i) || !s.positive(i, j)) continue;
            if (s.positive(i, k) || s.same_y(j, k)) continue;
            add(i, j, k, margin + distance(ex.row(i), ey.row(j)) - distance(ex.row(i), ey.row(k)));
          }
      break;
    case Family::sentence_to_image:
      for (std::size_t i = 0; i < ny; ++i)
        for (std::size_t j = 0; j < nx; ++j)
          for (std::size_t k = 0; k < nx; ++k) {
            if (s.restricted(j) || !s.positive(j, i)) continue;
            if (s.restricted(k)) {
              if (!s.hard_negative_for(k, i)) continue;
            } else if (s.positive(k, i) || s.same_x(j, k)) {
              continue;
            }
            add(i, j, k, margin + distance(ex.row(j), ey.row(i)) - distance(ex.row(k), ey.row(i)));
          }
      break;
    case Family::image_structure:
      for (std::size_t i = 0; i < nx; ++i)
        for (std::size_t j = 0; j < nx; ++j)
          for (std::size_t k = 0; k < nx; ++k) {
            if (s.restricted(i) || s.restricted(k) || i == j || !s.same_x(i, j)) continue;
            if (s.same_x(i, k)) continue;
            add(i, j, k, margin + distance(ex.row(i), ex.row(j)) - distance(ex.row(i), ex.row(k)));
          }
      break;
    case Family::sentence_structure:
      for (std::size_t i = 0; i < ny; ++i)
        for (std::size_t j = 0; j < ny; ++j)
          for (std::size_t k = 0; k < ny; ++k) {
            if (i == j || !s.same_y(i, j) || s.same_y(i, k)) continue;
            add(i, j, k, margin + distance(ey.row(i), ey.row(j)) - distance(ey.row(i), ey.row(k)));
          }
      break;
  }
  for (auto& [key, list] : table) {
    std::sort(list.begin(), list.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
  }
  return table;
}

/// Loss over all constraint triplets of all four families (no top-K cap).
inline LossTerms brute_force_loss(const Matrix& ex, const Matrix& ey, const BatchStructure& s,
                                  const LossConfig& cfg) {
  LossTerms t;
  const auto w = cfg.weights();
  for (Family f : kFamilies) {
    const std::size_t slot = static_cast<std::size_t>(f);
    if (w[slot] == 0.0) continue;
    for (const auto& [key, list] : enumerate_violations(ex, ey, s, cfg.margin, f))
      for (const auto& [v, neg] : list) t.sums[slot] += v;
  }
  for (std::size_t f = 0; f < 4; ++f) t.total += w[f] * t.sums[f];
  return t;
}

}  // namespace dspe::reference
