#pragma once

// Feature/pair file formats, correspondence graphs and mini-batch sampling.
//
// Feature file (binary, little-endian):
//   "DSPF" | u32 version (1) | u64 rows | u64 cols | rows*cols f32, row-major
// with a sibling text file (same stem, ".ids") holding one id per line.
// Pair file: UTF-8 TSV `x_id<TAB>y_id`, blank lines and `#` comments ignored.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dspe/error.hpp"
#include "dspe/loss.hpp"
#include "dspe/matrix.hpp"
#include "dspe/random.hpp"

namespace dspe {

/// Instance ids plus one feature row per id.
struct FeatureSet {
  std::vector<std::string> ids;
  Matrix features;

  std::size_t size() const { return ids.size(); }
  std::size_t dim() const { return features.cols(); }

  void validate() const {
    if (ids.size() != features.rows()) {
      throw ConsistencyError("feature set has " + std::to_string(ids.size()) + " ids but " +
                             std::to_string(features.rows()) + " rows");
    }
    std::unordered_set<std::string> seen;
    for (const auto& id : ids)
      if (!seen.insert(id).second) throw ConsistencyError("duplicate id '" + id + "'");
  }

  std::unordered_map<std::string, std::size_t> index() const {
    std::unordered_map<std::string, std::size_t> m;
    m.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) m.emplace(ids[i], i);
    return m;
  }
};

inline constexpr char kFeatureMagic[4] = {'D', 'S', 'P', 'F'};
inline constexpr std::uint32_t kFeatureVersion = 1;

inline std::filesystem::path ids_path_for(const std::filesystem::path& feature_path) {
  std::filesystem::path p = feature_path;
  p.replace_extension(".ids");
  return p;
}

/// Values are stored as 32-bit floats.
inline void write_feature_file(const std::filesystem::path& path, const FeatureSet& fs) {
  fs.validate();
  std::string buf(kFeatureMagic, 4);
  auto put = [&buf](const auto& v) {
    char b[sizeof(v)];
    std::memcpy(b, &v, sizeof(v));
    buf.append(b, sizeof(v));
  };
  put(kFeatureVersion);
  put(static_cast<std::uint64_t>(fs.features.rows()));
  put(static_cast<std::uint64_t>(fs.features.cols()));
  for (double v : fs.features.values()) put(static_cast<float>(v));
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write feature file " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  std::ofstream ids(ids_path_for(path), std::ios::trunc);
  if (!ids) throw Error("cannot write id file " + ids_path_for(path).string());
  for (const auto& id : fs.ids) ids << id << '\n';
}

inline FeatureSet load_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open feature file " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";
  constexpr std::size_t header = 4 + 4 + 8 + 8;
  if (bytes.size() < header) throw FormatError(where + "truncated header");
  if (std::memcmp(bytes.data(), kFeatureMagic, 4) != 0) throw FormatError(where + "bad magic");
  std::uint32_t version;
  std::uint64_t rows, cols;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&rows, bytes.data() + 8, 8);
  std::memcpy(&cols, bytes.data() + 16, 8);
  if (version != kFeatureVersion)
    throw FormatError(where + "unsupported version " + std::to_string(version));
  if (cols != 0 && rows > (std::uint64_t{1} << 40) / cols)
    throw FormatError(where + "implausible dimensions");
  const std::uint64_t payload = rows * cols * sizeof(float);
  if (bytes.size() - header != payload) {
    throw FormatError(where + "payload is " + std::to_string(bytes.size() - header) +
                      " bytes, header declares " + std::to_string(payload));
  }
  FeatureSet fs;
  fs.features = Matrix(rows, cols);
  auto vals = fs.features.values();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    float f;
    std::memcpy(&f, bytes.data() + header + i * sizeof(float), sizeof(float));
    vals[i] = f;
  }
  std::ifstream ids(ids_path_for(path));
  if (!ids) throw ConsistencyError(where + "missing id file " + ids_path_for(path).string());
  for (std::string line; std::getline(ids, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    fs.ids.push_back(line);
  }
  if (fs.ids.size() != rows) {
    throw ConsistencyError(where + "id file lists " + std::to_string(fs.ids.size()) +
                           " ids for " + std::to_string(rows) + " rows");
  }
  fs.validate();
  return fs;
}

/// Rounds every value to float precision so in-memory data equals what a
/// feature file round trip produces.
inline void round_to_float(Matrix& m) {
  for (double& v : m.values()) v = static_cast<double>(static_cast<float>(v));
}

using IdPair = std::pair<std::string, std::string>;

/// Splits a line on tabs.
inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> cols;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    cols.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return cols;
}

inline std::vector<IdPair> read_pair_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open pair file " + path.string());
  std::vector<IdPair> pairs;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto cols = split_tabs(line);
    if (cols.size() != 2 || cols[0].empty() || cols[1].empty()) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) +
                        ": expected two tab-separated ids");
    }
    pairs.emplace_back(std::move(cols[0]), std::move(cols[1]));
  }
  return pairs;
}

inline void write_pair_file(const std::filesystem::path& path, const std::vector<IdPair>& pairs,
                            const std::string& comment = {}) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write pair file " + path.string());
  if (!comment.empty()) out << "# " << comment << '\n';
  for (const auto& [x, y] : pairs) out << x << '\t' << y << '\n';
}

struct GraphOptions {
  bool dedupe = true;
  std::size_t max_x_per_y = 0;  // 0 = unlimited; keeps the first pairs per y in file order
};

/// Positive (x, y) pairs with derived same-meaning neighborhoods.
class CorrespondenceGraph {
 public:
  using IndexPair = std::pair<std::size_t, std::size_t>;

  CorrespondenceGraph() = default;

  CorrespondenceGraph(std::size_t num_x, std::size_t num_y, std::vector<IndexPair> pairs,
                      const GraphOptions& opt = {})
      : num_x_(num_x), num_y_(num_y) {
    std::vector<std::size_t> per_y(num_y, 0);
    std::unordered_set<std::uint64_t> seen;
    for (auto [x, y] : pairs) {
      if (x >= num_x || y >= num_y) throw ConsistencyError("pair index out of range");
      if (opt.dedupe && !seen.insert(static_cast<std::uint64_t>(x) * num_y + y).second) continue;
      if (opt.max_x_per_y != 0 && per_y[y] >= opt.max_x_per_y) continue;
      ++per_y[y];
      pairs_.emplace_back(x, y);
    }
    y_of_x_.assign(num_x, {});
    x_of_y_.assign(num_y, {});
    for (auto [x, y] : pairs_) {
      y_of_x_[x].push_back(y);
      x_of_y_[y].push_back(x);
    }
    auto uniq = [](std::vector<std::size_t>& v) {
      std::sort(v.begin(), v.end());
      v.erase(std::unique(v.begin(), v.end()), v.end());
    };
    for (auto& v : y_of_x_) uniq(v);
    for (auto& v : x_of_y_) uniq(v);
    nbr_x_.assign(num_x, {});
    nbr_y_.assign(num_y, {});
    for (std::size_t x = 0; x < num_x; ++x) {
      nbr_x_[x].push_back(x);
      for (std::size_t y : y_of_x_[x])
        nbr_x_[x].insert(nbr_x_[x].end(), x_of_y_[y].begin(), x_of_y_[y].end());
      uniq(nbr_x_[x]);
    }
    for (std::size_t y = 0; y < num_y; ++y) {
      nbr_y_[y].push_back(y);
      for (std::size_t x : x_of_y_[y])
        nbr_y_[y].insert(nbr_y_[y].end(), y_of_x_[x].begin(), y_of_x_[x].end());
      uniq(nbr_y_[y]);
    }
  }

  std::size_t num_x() const { return num_x_; }
  std::size_t num_y() const { return num_y_; }
  const std::vector<IndexPair>& pairs() const { return pairs_; }
  const std::vector<std::size_t>& partners_of_x(std::size_t x) const { return y_of_x_.at(x); }
  const std::vector<std::size_t>& partners_of_y(std::size_t y) const { return x_of_y_.at(y); }
  /// N(x): images sharing a positive partner with x, including x.
  const std::vector<std::size_t>& neighbors_x(std::size_t x) const { return nbr_x_.at(x); }
  /// N(y): sentences sharing a positive partner with y, including y.
  const std::vector<std::size_t>& neighbors_y(std::size_t y) const { return nbr_y_.at(y); }

  bool is_positive(std::size_t x, std::size_t y) const {
    const auto& v = y_of_x_.at(x);
    return std::binary_search(v.begin(), v.end(), y);
  }

 private:
  std::size_t num_x_ = 0;
  std::size_t num_y_ = 0;
  std::vector<IndexPair> pairs_;
  std::vector<std::vector<std::size_t>> y_of_x_, x_of_y_, nbr_x_, nbr_y_;
};

/// Resolves id pairs against the two id universes.
inline CorrespondenceGraph build_graph(const std::vector<std::string>& x_ids,
                                       const std::vector<std::string>& y_ids,
                                       const std::vector<IdPair>& pairs,
                                       const GraphOptions& opt = {}) {
  std::unordered_map<std::string, std::size_t> xi, yi;
  for (std::size_t i = 0; i < x_ids.size(); ++i) xi.emplace(x_ids[i], i);
  for (std::size_t i = 0; i < y_ids.size(); ++i) yi.emplace(y_ids[i], i);
  std::vector<CorrespondenceGraph::IndexPair> idx;
  idx.reserve(pairs.size());
  for (const auto& [x, y] : pairs) {
    auto a = xi.find(x);
    if (a == xi.end()) throw ConsistencyError("pair references unknown x id '" + x + "'");
    auto b = yi.find(y);
    if (b == yi.end()) throw ConsistencyError("pair references unknown y id '" + y + "'");
    idx.emplace_back(a->second, b->second);
  }
  return CorrespondenceGraph(x_ids.size(), y_ids.size(), std::move(idx), opt);
}

/// One mini-batch: the sampled pairs plus the rows each view contributes.
struct MiniBatch {
  std::vector<std::size_t> pair_indices;  // into graph.pairs()
  std::vector<std::size_t> x_rows;        // global x index per batch-local x
  std::vector<std::size_t> y_rows;
  std::vector<std::size_t> extra_x;  // rows added by augmentation (global)
  std::vector<std::size_t> extra_y;
  std::vector<std::pair<std::size_t, std::size_t>> hard_negatives;  // (global x, global y)
};

/// Collects the rows of the given pairs; with `augment`, appends for each
/// batch image one positive sentence not yet in the batch, and for each batch
/// sentence one positive image not yet in the batch, when available.
inline MiniBatch assemble_batch(const CorrespondenceGraph& g,
                                std::vector<std::size_t> pair_indices, bool augment, Rng& rng) {
  MiniBatch b;
  b.pair_indices = std::move(pair_indices);
  std::unordered_set<std::size_t> in_x, in_y;
  for (std::size_t pi : b.pair_indices) {
    const auto [x, y] = g.pairs().at(pi);
    if (in_x.insert(x).second) b.x_rows.push_back(x);
    if (in_y.insert(y).second) b.y_rows.push_back(y);
  }
  if (augment) {
    const std::vector<std::size_t> xs = b.x_rows;
    const std::vector<std::size_t> ys = b.y_rows;
    std::vector<std::size_t> avail;
    for (std::size_t x : xs) {
      avail.clear();
      for (std::size_t y : g.partners_of_x(x))
        if (!in_y.count(y)) avail.push_back(y);
      if (avail.empty()) continue;
      const std::size_t pick = avail[rng.below(avail.size())];
      in_y.insert(pick);
      b.y_rows.push_back(pick);
      b.extra_y.push_back(pick);
    }
    for (std::size_t y : ys) {
      avail.clear();
      for (std::size_t x : g.partners_of_y(y))
        if (!in_x.count(x)) avail.push_back(x);
      if (avail.empty()) continue;
      const std::size_t pick = avail[rng.below(avail.size())];
      in_x.insert(pick);
      b.x_rows.push_back(pick);
      b.extra_x.push_back(pick);
    }
  }
  return b;
}

/// Samples batch_pairs distinct pairs uniformly without replacement.
inline MiniBatch sample_minibatch(const CorrespondenceGraph& g, std::size_t batch_pairs,
                                  bool augment, Rng& rng) {
  const std::size_t n = g.pairs().size();
  if (n == 0) throw ConfigError("cannot sample from an empty dataset");
  if (batch_pairs < 1 || batch_pairs > n) {
    throw ConfigError("batch of " + std::to_string(batch_pairs) + " pairs requested from " +
                      std::to_string(n) + " available");
  }
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  // partial Fisher-Yates
  for (std::size_t i = 0; i < batch_pairs; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(batch_pairs);
  return assemble_batch(g, std::move(idx), augment, rng);
}

/// Shuffles all pairs and cuts them into disjoint batches of batch_pairs
/// (the last one may be smaller).
inline std::vector<std::vector<std::size_t>> epoch_partition(std::size_t num_pairs,
                                                             std::size_t batch_pairs, Rng& rng) {
  if (num_pairs == 0) throw ConfigError("cannot sample from an empty dataset");
  if (batch_pairs < 1 || batch_pairs > num_pairs) {
    throw ConfigError("batch of " + std::to_string(batch_pairs) + " pairs requested from " +
                      std::to_string(num_pairs) + " available");
  }
  std::vector<std::size_t> order(num_pairs);
  for (std::size_t i = 0; i < num_pairs; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t lo = 0; lo < num_pairs; lo += batch_pairs) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(lo),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(num_pairs, lo + batch_pairs)));
  }
  return batches;
}

/// Hard negatives per global y: global x rows that may serve as its negatives.
using HardNegativePool = std::unordered_map<std::size_t, std::vector<std::size_t>>;

/// Appends the hard-negative rows of every y in the batch to the x view.
inline void attach_hard_negatives(MiniBatch& b, const CorrespondenceGraph& g,
                                  const HardNegativePool& pool) {
  if (pool.empty()) return;
  std::unordered_set<std::size_t> in_x(b.x_rows.begin(), b.x_rows.end());
  for (std::size_t y : b.y_rows) {
    auto it = pool.find(y);
    if (it == pool.end()) continue;
    for (std::size_t x : it->second) {
      if (x >= g.num_x()) throw ConsistencyError("hard negative row out of range");
      if (!g.partners_of_x(x).empty()) continue;  // a positive row is never negative-only
      if (in_x.insert(x).second) b.x_rows.push_back(x);
      b.hard_negatives.emplace_back(x, y);
    }
  }
}

/// Batch-local structure: every graph pair among the batch rows is positive,
/// and neighborhoods are the graph's N(x), N(y) restricted to the batch.
inline BatchStructure batch_structure(const CorrespondenceGraph& g, const MiniBatch& b) {
  std::unordered_map<std::size_t, std::size_t> lx, ly;
  for (std::size_t i = 0; i < b.x_rows.size(); ++i) lx.emplace(b.x_rows[i], i);
  for (std::size_t i = 0; i < b.y_rows.size(); ++i) ly.emplace(b.y_rows[i], i);
  std::vector<std::pair<std::size_t, std::size_t>> local;
  for (std::size_t i = 0; i < b.x_rows.size(); ++i) {
    for (std::size_t y : g.partners_of_x(b.x_rows[i])) {
      auto it = ly.find(y);
      if (it != ly.end()) local.emplace_back(i, it->second);
    }
  }
  BatchStructure s = BatchStructure::from_pairs(b.x_rows.size(), b.y_rows.size(), local);
  for (std::size_t i = 0; i < b.x_rows.size(); ++i)
    for (std::size_t n : g.neighbors_x(b.x_rows[i])) {
      auto it = lx.find(n);
      if (it != lx.end()) s.link_x(i, it->second);
    }
  for (std::size_t i = 0; i < b.y_rows.size(); ++i)
    for (std::size_t n : g.neighbors_y(b.y_rows[i])) {
      auto it = ly.find(n);
      if (it != ly.end()) s.link_y(i, it->second);
    }
  for (auto [x, y] : b.hard_negatives) s.add_hard_negative(lx.at(x), ly.at(y));
  return s;
}

}  // namespace dspe
