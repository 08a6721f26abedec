#pragma once

// Phrase-localization corpus: proposal and ground-truth boxes per image,
// grouped into (image, phrase) queries.
//
// Box file: UTF-8 TSV
//   image_id<TAB>kind{P|G}<TAB>phrase_id<TAB>x1<TAB>y1<TAB>x2<TAB>y2[<TAB>feature_row_index]
// P rows are image-level proposals (their phrase column is ignored, "-" by
// convention); G rows are ground-truth boxes of one phrase. Feature rows
// index the region feature file.

#include <charconv>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dspe/box.hpp"
#include "dspe/data.hpp"
#include "dspe/error.hpp"

namespace dspe {

inline constexpr std::size_t kMaxProposals = 100;

struct BoxRecord {
  std::string image_id;
  char kind = 'P';  // 'P' proposal, 'G' ground truth
  std::string phrase_id;
  Box box;
  std::optional<std::size_t> feature_row;
};

namespace detail {

inline double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(where + ": invalid number '" + s + "'");
  }
}

inline std::size_t parse_index(const std::string& s, const std::string& where) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw FormatError(where + ": invalid row index '" + s + "'");
  return v;
}

}  // namespace detail

inline std::vector<BoxRecord> read_box_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open box file " + path.string());
  std::vector<BoxRecord> out;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    auto c = split_tabs(line);
    if (c.size() != 7 && c.size() != 8) throw FormatError(where + ": expected 7 or 8 columns");
    if (c[1] != "P" && c[1] != "G") throw FormatError(where + ": kind must be P or G");
    BoxRecord r;
    r.image_id = c[0];
    r.kind = c[1][0];
    r.phrase_id = c[2];
    r.box = {detail::parse_double(c[3], where), detail::parse_double(c[4], where),
             detail::parse_double(c[5], where), detail::parse_double(c[6], where)};
    if (!r.box.valid()) throw FormatError(where + ": box has non-positive area");
    if (c.size() == 8) r.feature_row = detail::parse_index(c[7], where);
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_box_file(const std::filesystem::path& path, const std::vector<BoxRecord>& recs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write box file " + path.string());
  out.precision(17);
  for (const auto& r : recs) {
    out << r.image_id << '\t' << r.kind << '\t' << r.phrase_id << '\t' << r.box.x1 << '\t'
        << r.box.y1 << '\t' << r.box.x2 << '\t' << r.box.y2;
    if (r.feature_row) out << '\t' << *r.feature_row;
    out << '\n';
  }
}

/// One (image, phrase) localization query.
struct LocalizationQuery {
  std::string image_id;
  std::string phrase_id;
  std::size_t phrase_row = 0;  // into LocalizationCorpus::phrases
  std::vector<Box> proposals;
  std::vector<std::size_t> proposal_rows;  // into LocalizationCorpus::regions
  std::vector<Box> gt;
  std::vector<std::size_t> gt_rows;  // GT region rows, when the file provides them
};

struct LocalizationCorpus {
  FeatureSet regions;
  FeatureSet phrases;
  std::vector<LocalizationQuery> queries;

  /// Phrase ids in order of first appearance.
  std::vector<std::string> unique_phrases() const {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& q : queries)
      if (seen.insert(q.phrase_id).second) out.push_back(q.phrase_id);
    return out;
  }

  /// Positive (region id, phrase id) pairs from ground-truth boxes with features.
  std::vector<IdPair> training_pairs() const {
    std::vector<IdPair> out;
    for (const auto& q : queries)
      for (std::size_t r : q.gt_rows) out.emplace_back(regions.ids.at(r), q.phrase_id);
    return out;
  }
};

/// Groups box records into queries; one query per (image, phrase) that has
/// ground truth, in order of first appearance.
inline LocalizationCorpus assemble_corpus(const std::vector<BoxRecord>& records,
                                          FeatureSet regions, FeatureSet phrases) {
  regions.validate();
  phrases.validate();
  LocalizationCorpus c;
  c.regions = std::move(regions);
  c.phrases = std::move(phrases);
  const auto phrase_index = c.phrases.index();

  auto check_row = [&](const BoxRecord& r) {
    if (r.feature_row && *r.feature_row >= c.regions.size()) {
      throw ConsistencyError("box record for image '" + r.image_id + "' references region row " +
                             std::to_string(*r.feature_row) + " of " +
                             std::to_string(c.regions.size()));
    }
  };

  std::unordered_map<std::string, std::pair<std::vector<Box>, std::vector<std::size_t>>> proposals;
  std::map<std::pair<std::string, std::string>, std::size_t> query_of;
  for (const auto& r : records) {
    check_row(r);
    if (r.kind == 'P') {
      if (!r.feature_row)
        throw ConsistencyError("proposal in image '" + r.image_id + "' has no feature row");
      auto& [boxes, rows] = proposals[r.image_id];
      boxes.push_back(r.box);
      rows.push_back(*r.feature_row);
      continue;
    }
    auto key = std::make_pair(r.image_id, r.phrase_id);
    auto it = query_of.find(key);
    if (it == query_of.end()) {
      auto pi = phrase_index.find(r.phrase_id);
      if (pi == phrase_index.end())
        throw ConsistencyError("ground truth references unknown phrase '" + r.phrase_id + "'");
      LocalizationQuery q;
      q.image_id = r.image_id;
      q.phrase_id = r.phrase_id;
      q.phrase_row = pi->second;
      it = query_of.emplace(key, c.queries.size()).first;
      c.queries.push_back(std::move(q));
    }
    auto& q = c.queries[it->second];
    q.gt.push_back(r.box);
    if (r.feature_row) q.gt_rows.push_back(*r.feature_row);
  }
  for (auto& q : c.queries) {
    auto it = proposals.find(q.image_id);
    if (it == proposals.end() || it->second.first.empty())
      throw ConsistencyError("image '" + q.image_id + "' has no proposals");
    if (it->second.first.size() > kMaxProposals) {
      throw ConsistencyError("image '" + q.image_id + "' has " +
                             std::to_string(it->second.first.size()) + " proposals (max " +
                             std::to_string(kMaxProposals) + ")");
    }
    q.proposals = it->second.first;
    q.proposal_rows = it->second.second;
  }
  return c;
}

inline LocalizationCorpus load_corpus(const std::filesystem::path& boxes,
                                      const std::filesystem::path& regions,
                                      const std::filesystem::path& phrases) {
  return assemble_corpus(read_box_file(boxes), load_feature_file(regions),
                         load_feature_file(phrases));
}

}  // namespace dspe
