#pragma once

// Experiment configuration: a fixed set of typed keys with defaults, read
// from flat `key = value` files and overridden from the command line.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dspe/error.hpp"
#include "dspe/eval.hpp"
#include "dspe/hard_negatives.hpp"
#include "dspe/network.hpp"
#include "dspe/trainer.hpp"

namespace dspe {

enum class KeyKind { integer, real, boolean, text };

struct KeySpec {
  std::string_view name;
  KeyKind kind;
  std::string_view default_value;
  std::string_view help;
};

// clang-format off
inline constexpr KeySpec kConfigKeys[] = {
  {"seed",                   KeyKind::integer, "1",      "seed for initialization, batching and dropout"},
  {"threads",                KeyKind::integer, "1",      "worker threads for evaluation distances"},
  {"epochs",                 KeyKind::integer, "30",     "training epochs"},
  {"batch_pairs",            KeyKind::integer, "64",     "ground-truth pairs per mini-batch"},
  {"augment",                KeyKind::boolean, "true",   "add one extra positive per batch item"},
  {"margin",                 KeyKind::real,    "0.1",    "hinge margin m"},
  {"lambda1",                KeyKind::real,    "2",      "weight of the sentence-to-image ranking term"},
  {"lambda2",                KeyKind::real,    "0",      "weight of the image structure term"},
  {"lambda3",                KeyKind::real,    "0.2",    "weight of the sentence structure term"},
  {"top_k",                  KeyKind::integer, "50",     "violating negatives kept per positive pair"},
  {"loss_normalization",     KeyKind::text,    "pair_mean", "sum, or pair_mean to divide by the batch's positive pairs"},
  {"lr0",                    KeyKind::real,    "0.1",    "initial learning rate"},
  {"momentum",               KeyKind::real,    "0.9",    "SGD momentum"},
  {"weight_decay",           KeyKind::real,    "0.0005", "weight decay on affine weights"},
  {"lr_decay",               KeyKind::real,    "0.1",    "learning-rate decay factor"},
  {"lr_decay_every",         KeyKind::integer, "10",     "epochs between learning-rate decays"},
  {"hidden_dim_x",           KeyKind::integer, "2048",   "image branch hidden width"},
  {"hidden_dim_y",           KeyKind::integer, "2048",   "text branch hidden width"},
  {"embed_dim",              KeyKind::integer, "512",    "shared embedding width"},
  {"dropout",                KeyKind::real,    "0.5",    "dropout probability after the ReLU"},
  {"max_x_per_y",            KeyKind::integer, "0",      "cap on regions per phrase when building the graph (0 = none)"},
  {"alpha",                  KeyKind::real,    "0.7",    "weight of the region-phrase distance when fusing"},
  {"nms_threshold",          KeyKind::real,    "0.3",    "NMS overlap threshold for mAP"},
  {"hard_negative_cap",      KeyKind::integer, "50",     "hard negatives kept per phrase"},
  {"finetune_epochs",        KeyKind::integer, "5",      "epochs of ranking-only fine-tuning"},
  {"finetune_lr0",           KeyKind::real,    "0.03",   "initial learning rate for fine-tuning"},
  {"train_x",                KeyKind::text,    "",       "training image/region feature file"},
  {"train_y",                KeyKind::text,    "",       "training sentence/phrase feature file"},
  {"train_pairs",            KeyKind::text,    "",       "training pair file"},
  {"eval_x",                 KeyKind::text,    "",       "evaluation image feature file"},
  {"eval_y",                 KeyKind::text,    "",       "evaluation sentence feature file"},
  {"eval_pairs",             KeyKind::text,    "",       "evaluation pair file"},
  {"boxes",                  KeyKind::text,    "",       "localization box file"},
  {"regions",                KeyKind::text,    "",       "region feature file"},
  {"phrases",                KeyKind::text,    "",       "phrase feature file"},
  {"checkpoint",             KeyKind::text,    "",       "model checkpoint (input or output)"},
  {"init_checkpoint",        KeyKind::text,    "",       "checkpoint to continue training from"},
  {"rp_checkpoint",          KeyKind::text,    "",       "region-phrase checkpoint for fusion"},
  {"sentence_phrases",       KeyKind::text,    "",       "sentence-to-phrase pair file for fusion"},
  {"hard_negatives",         KeyKind::text,    "",       "hard-negative TSV (input or output)"},
  {"output",                 KeyKind::text,    "",       "output CSV or directory"},
  {"synth_kind",             KeyKind::text,    "retrieval", "retrieval or localization"},
  {"synth_clusters",         KeyKind::integer, "32",     "synthetic clusters"},
  {"synth_heldout_clusters", KeyKind::integer, "8",      "held-out clusters from the same generator"},
  {"synth_images_per_cluster", KeyKind::integer, "1",    "images per cluster"},
  {"synth_sents_per_image",  KeyKind::integer, "5",      "sentences per image"},
  {"synth_dim_x",            KeyKind::integer, "64",     "image feature width"},
  {"synth_dim_y",            KeyKind::integer, "48",     "sentence feature width"},
  {"synth_noise",            KeyKind::real,    "0.05",   "feature noise sigma"},
  {"synth_images",           KeyKind::integer, "500",    "localization images per split"},
  {"synth_phrases",          KeyKind::integer, "8",      "localization phrase classes"},
  {"synth_regions_per_image", KeyKind::integer, "4",     "regions per image for fusion data"},
  {"synth_phrases_per_sentence", KeyKind::integer, "2",  "phrases per sentence for fusion data"},
  {"gradcheck_seeds",        KeyKind::integer, "20",     "seeds in the gradient-check suite"},
};
// clang-format on

inline const KeySpec* find_key(std::string_view name) {
  for (const auto& k : kConfigKeys)
    if (k.name == name) return &k;
  return nullptr;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    throw ConfigError("'" + key + "' expects a nonnegative integer, got '" + v + "'");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

}  // namespace detail

class ExperimentConfig {
 public:
  ExperimentConfig() {
    for (const auto& k : kConfigKeys) values_[std::string(k.name)] = std::string(k.default_value);
  }

  /// Rejects unknown keys and values that do not parse as the key's type.
  void set(const std::string& key, const std::string& value) {
    const KeySpec* k = find_key(key);
    if (!k) throw ConfigError("unknown configuration key '" + key + "'");
    switch (k->kind) {
      case KeyKind::integer: detail::parse_u64(key, value); break;
      case KeyKind::real: detail::parse_real(key, value); break;
      case KeyKind::boolean: detail::parse_bool(key, value); break;
      case KeyKind::text: break;
    }
    values_[key] = value;
  }

  /// `key = value` lines; `#` starts a comment.
  void merge_text(const std::string& text, const std::string& source) {
    std::size_t lineno = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
      std::size_t end = text.find('\n', start);
      if (end == std::string::npos) end = text.size();
      std::string line = text.substr(start, end - start);
      start = end + 1;
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
      try {
        set(detail::trim(std::string_view(line).substr(0, eq)),
            detail::trim(std::string_view(line).substr(eq + 1)));
      } catch (const ConfigError& e) {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  void merge_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    merge_text(text, path.string());
  }

  const std::string& text(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown configuration key '" + key + "'");
    return it->second;
  }
  std::size_t count(const std::string& key) const {
    return static_cast<std::size_t>(detail::parse_u64(key, text(key)));
  }
  std::uint64_t u64(const std::string& key) const { return detail::parse_u64(key, text(key)); }
  double real(const std::string& key) const { return detail::parse_real(key, text(key)); }
  bool flag(const std::string& key) const { return detail::parse_bool(key, text(key)); }

  /// Path-valued key that must be set.
  std::filesystem::path path(const std::string& key) const {
    const std::string& v = text(key);
    if (v.empty()) throw ConfigError("'" + key + "' must be set");
    return v;
  }

  /// Fully resolved configuration, one `key = value` per line, sorted.
  std::string echo() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  // ---- typed views; each validates what it returns

  LossConfig loss() const {
    LossConfig c;
    c.margin = real("margin");
    c.lambda1 = real("lambda1");
    c.lambda2 = real("lambda2");
    c.lambda3 = real("lambda3");
    c.top_k = count("top_k");
    c.validate();
    return c;
  }

  SgdConfig sgd() const {
    SgdConfig c;
    c.lr0 = real("lr0");
    c.momentum = real("momentum");
    c.weight_decay = real("weight_decay");
    c.decay_factor = real("lr_decay");
    c.decay_every = count("lr_decay_every");
    c.validate();
    return c;
  }

  TrainConfig train() const {
    TrainConfig c;
    c.loss = loss();
    c.sgd = sgd();
    c.epochs = count("epochs");
    c.batch_pairs = count("batch_pairs");
    c.augment = flag("augment");
    c.seed = u64("seed");
    c.normalization = parse_normalization(text("loss_normalization"));
    c.validate();
    return c;
  }

  TrainConfig finetune() const {
    TrainConfig c = train();
    c.epochs = count("finetune_epochs");
    c.sgd.lr0 = real("finetune_lr0");
    c.validate();
    return c;
  }

  BranchSpec branch_x(std::size_t input_dim) const {
    BranchSpec s{input_dim, count("hidden_dim_x"), count("embed_dim"), real("dropout")};
    s.validate("image branch");
    return s;
  }
  BranchSpec branch_y(std::size_t input_dim) const {
    BranchSpec s{input_dim, count("hidden_dim_y"), count("embed_dim"), real("dropout")};
    s.validate("text branch");
    return s;
  }

  GraphOptions graph() const { return {true, count("max_x_per_y")}; }

  unsigned threads() const {
    const std::size_t t = count("threads");
    if (t < 1) throw ConfigError("threads must be >= 1");
    return static_cast<unsigned>(t);
  }

  double alpha() const {
    const double a = real("alpha");
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
    return a;
  }

  double nms_threshold() const {
    const double t = real("nms_threshold");
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("nms_threshold must lie in [0, 1]");
    return t;
  }

  /// Checks every typed view so errors surface before any work starts.
  void validate() const {
    train();
    finetune();
    branch_x(1);
    branch_y(1);
    threads();
    alpha();
    nms_threshold();
    if (count("hard_negative_cap") < 1) throw ConfigError("hard_negative_cap must be >= 1");
    if (count("gradcheck_seeds") < 1) throw ConfigError("gradcheck_seeds must be >= 1");
    const std::string& kind = text("synth_kind");
    if (kind != "retrieval" && kind != "localization")
      throw ConfigError("synth_kind must be 'retrieval' or 'localization'");
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace dspe
