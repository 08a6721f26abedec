#pragma once

// Synthetic stand-ins for real image/text features.
//
// A "world" fixes the random linear maps from a shared latent space into the
// two feature spaces; datasets drawn from the same world (e.g. training and
// held-out clusters) are therefore related by the same ground-truth maps.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dspe/box.hpp"
#include "dspe/data.hpp"
#include "dspe/localization.hpp"
#include "dspe/matrix.hpp"
#include "dspe/random.hpp"

namespace dspe {

namespace detail {

inline std::string numbered(const std::string& prefix, std::size_t i) {
  std::string n = std::to_string(i);
  return prefix + std::string(n.size() < 5 ? 5 - n.size() : 0, '0') + n;
}

inline Vector random_unit(std::size_t dim, Rng& rng) {
  Vector v(dim);
  double norm = 0.0;
  while (norm < 1e-8) {
    for (double& x : v) x = rng.normal();
    norm = std::sqrt(squared_norm(v));
  }
  for (double& x : v) x /= norm;
  return v;
}

inline Matrix gaussian_map(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = rng.normal();
  return m;
}

/// out = map * latent + sigma * noise
inline void project(const Matrix& map, std::span<const double> latent, double sigma, Rng& rng,
                    std::span<double> out) {
  for (std::size_t i = 0; i < map.rows(); ++i) {
    double s = 0.0;
    auto r = map.row(i);
    for (std::size_t k = 0; k < latent.size(); ++k) s += r[k] * latent[k];
    out[i] = s + (sigma > 0.0 ? sigma * rng.normal() : 0.0);
  }
}

}  // namespace detail

/// Clustered image/sentence features with ground-truth pairs.
struct RetrievalData {
  FeatureSet images;
  FeatureSet sentences;
  std::vector<IdPair> pairs;
  std::vector<std::size_t> image_cluster;
  std::vector<std::size_t> sentence_cluster;
  Matrix latents;  // one unit vector per cluster
};

/// Region features per image and phrase features per sentence, for fusing a
/// region-phrase model into image-sentence retrieval.
struct RegionPhraseData {
  FeatureSet regions;
  FeatureSet phrases;
  std::vector<BoxRecord> boxes;           // one P record per region, with its feature row
  std::vector<IdPair> sentence_phrases;  // (sentence id, phrase id)
};

class SyntheticWorld {
 public:
  SyntheticWorld(std::size_t feat_dim_x, std::size_t feat_dim_y, std::size_t latent_dim,
                 std::uint64_t seed)
      : latent_dim_(latent_dim) {
    if (feat_dim_x < 1 || feat_dim_y < 1 || latent_dim < 1)
      throw ConfigError("synthetic dimensions must be >= 1");
    Rng rng(seed);
    map_x_ = detail::gaussian_map(feat_dim_x, latent_dim, rng);
    map_y_ = detail::gaussian_map(feat_dim_y, latent_dim, rng);
  }

  const Matrix& map_x() const { return map_x_; }
  const Matrix& map_y() const { return map_y_; }
  std::size_t latent_dim() const { return latent_dim_; }

  /// Each cluster draws a latent unit vector; every image and sentence is
  /// its cluster latent pushed through the view's map plus Gaussian noise.
  RetrievalData generate(std::size_t num_clusters, std::size_t images_per_cluster,
                         std::size_t sents_per_image, double noise_sigma, std::uint64_t seed,
                         const std::string& prefix = "") const {
    if (num_clusters < 1 || images_per_cluster < 1 || sents_per_image < 1)
      throw ConfigError("synthetic counts must be >= 1");
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise sigma must be nonnegative");
    Rng rng(seed);
    RetrievalData d;
    d.latents = Matrix(num_clusters, latent_dim_);
    for (std::size_t c = 0; c < num_clusters; ++c) {
      const Vector z = detail::random_unit(latent_dim_, rng);
      std::copy(z.begin(), z.end(), d.latents.row(c).begin());
    }
    const std::size_t n_img = num_clusters * images_per_cluster;
    d.images.features = Matrix(n_img, map_x_.rows());
    d.sentences.features = Matrix(n_img * sents_per_image, map_y_.rows());
    for (std::size_t c = 0; c < num_clusters; ++c) {
      for (std::size_t k = 0; k < images_per_cluster; ++k) {
        const std::size_t i = c * images_per_cluster + k;
        d.images.ids.push_back(detail::numbered(prefix + "img_", i));
        d.image_cluster.push_back(c);
        detail::project(map_x_, d.latents.row(c), noise_sigma, rng, d.images.features.row(i));
        for (std::size_t s = 0; s < sents_per_image; ++s) {
          const std::size_t j = i * sents_per_image + s;
          d.sentences.ids.push_back(detail::numbered(prefix + "sent_", j));
          d.sentence_cluster.push_back(c);
          detail::project(map_y_, d.latents.row(c), noise_sigma, rng,
                          d.sentences.features.row(j));
          d.pairs.emplace_back(d.images.ids.back(), d.sentences.ids.back());
        }
      }
    }
    round_to_float(d.images.features);
    round_to_float(d.sentences.features);
    return d;
  }

  /// Region 0 of every image carries the image's cluster latent; the rest are
  /// clutter. Every phrase of a sentence carries the sentence's cluster latent.
  RegionPhraseData annotate(const RetrievalData& d, std::size_t regions_per_image,
                            std::size_t phrases_per_sentence, double noise_sigma,
                            std::uint64_t seed, const std::string& prefix = "") const {
    if (regions_per_image < 1) throw ConfigError("need at least one region per image");
    Rng rng(seed);
    RegionPhraseData a;
    const std::size_t n_img = d.images.size();
    a.regions.features = Matrix(n_img * regions_per_image, map_x_.rows());
    for (std::size_t i = 0; i < n_img; ++i) {
      for (std::size_t r = 0; r < regions_per_image; ++r) {
        const std::size_t row = i * regions_per_image + r;
        const Vector z = r == 0 ? Vector(d.latents.row(d.image_cluster[i]).begin(),
                                         d.latents.row(d.image_cluster[i]).end())
                                : detail::random_unit(latent_dim_, rng);
        detail::project(map_x_, z, noise_sigma, rng, a.regions.features.row(row));
        a.regions.ids.push_back(detail::numbered(prefix + "reg_", row));
        const double x1 = rng.uniform(0.0, 60.0), y1 = rng.uniform(0.0, 60.0);
        a.boxes.push_back({d.images.ids[i], 'P', "-",
                           Box{x1, y1, x1 + rng.uniform(10.0, 40.0), y1 + rng.uniform(10.0, 40.0)},
                           row});
      }
    }
    const std::size_t n_sent = d.sentences.size();
    a.phrases.features = Matrix(n_sent * phrases_per_sentence, map_y_.rows());
    for (std::size_t j = 0; j < n_sent; ++j) {
      for (std::size_t p = 0; p < phrases_per_sentence; ++p) {
        const std::size_t row = j * phrases_per_sentence + p;
        detail::project(map_y_, d.latents.row(d.sentence_cluster[j]), noise_sigma, rng,
                        a.phrases.features.row(row));
        a.phrases.ids.push_back(detail::numbered(prefix + "phr_", row));
        a.sentence_phrases.emplace_back(d.sentences.ids[j], a.phrases.ids.back());
      }
    }
    round_to_float(a.regions.features);
    round_to_float(a.phrases.features);
    return a;
  }

 private:
  std::size_t latent_dim_;
  Matrix map_x_;
  Matrix map_y_;
};

inline constexpr std::size_t kDefaultLatentDim = 8;

/// One-call generator: the world and the clusters both derive from `seed`.
inline RetrievalData gen_synthetic(std::size_t num_clusters, std::size_t images_per_cluster,
                                   std::size_t sents_per_image, std::size_t feat_dim_x,
                                   std::size_t feat_dim_y, double noise_sigma,
                                   std::uint64_t seed) {
  SyntheticWorld world(feat_dim_x, feat_dim_y, kDefaultLatentDim, seed);
  return world.generate(num_clusters, images_per_cluster, sents_per_image, noise_sigma,
                        seed ^ 0x5bd1e995ULL);
}

// ------------------------------------------------------------ localization

struct LocalizationSynthConfig {
  std::size_t num_phrases = 8;
  std::size_t feat_dim_x = 32;
  std::size_t feat_dim_y = 24;
  std::size_t latent_dim = 16;
  std::size_t max_objects = 2;           // per image, distinct phrases
  std::size_t jittered_per_object = 12;  // proposals around each object
  std::size_t background_boxes = 16;     // random proposals
  double image_size = 100.0;
  double noise = 0.05;              // latent-space noise per region
  double background_weight = 0.35;  // weight of the shared background direction
  double clutter_weight = 0.35;     // weight of a per-box random direction
  double background_objectness = 0.5;  // share of the mean phrase direction in the background
};

/// Images with 1..max_objects objects, each labeled by a phrase. A region's
/// latent mixes its best-overlapping object's phrase latent (weight = IoU)
/// with a shared background direction and per-box clutter (weight 1 - IoU),
/// renormalized to unit length before noise; poorly localized boxes thus
/// look like their object, only less so.
class LocalizationWorld {
 public:
  LocalizationWorld(const LocalizationSynthConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.num_phrases < 2 || cfg.max_objects < 1 || cfg.max_objects > cfg.num_phrases)
      throw ConfigError("localization world needs >= 2 phrases and 1..num_phrases objects");
    Rng rng(seed);
    map_x_ = detail::gaussian_map(cfg.feat_dim_x, cfg.latent_dim, rng);
    map_y_ = detail::gaussian_map(cfg.feat_dim_y, cfg.latent_dim, rng);
    phrase_latents_ = Matrix(cfg.num_phrases, cfg.latent_dim);
    for (std::size_t c = 0; c < cfg.num_phrases; ++c) {
      const Vector z = detail::random_unit(cfg.latent_dim, rng);
      std::copy(z.begin(), z.end(), phrase_latents_.row(c).begin());
    }
    {
      const Vector r = detail::random_unit(cfg.latent_dim, rng);
      Vector mean(cfg.latent_dim, 0.0);
      for (std::size_t c = 0; c < cfg.num_phrases; ++c)
        for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += phrase_latents_(c, k);
      const double mn = std::sqrt(squared_norm(mean));
      background_.assign(cfg.latent_dim, 0.0);
      for (std::size_t k = 0; k < mean.size(); ++k)
        background_[k] = cfg.background_objectness * mean[k] / mn +
                         (1.0 - cfg.background_objectness) * r[k];
      const double bn = std::sqrt(squared_norm(background_));
      for (double& v : background_) v /= bn;
    }
    phrases_.features = Matrix(cfg.num_phrases, cfg.feat_dim_y);
    for (std::size_t c = 0; c < cfg.num_phrases; ++c) {
      phrases_.ids.push_back(detail::numbered("phrase_", c));
      detail::project(map_y_, phrase_latents_.row(c), 0.0, rng, phrases_.features.row(c));
    }
    round_to_float(phrases_.features);
  }

  const LocalizationSynthConfig& config() const { return cfg_; }
  const FeatureSet& phrases() const { return phrases_; }

  struct Sample {
    LocalizationCorpus corpus;
    std::vector<BoxRecord> records;
  };

  Sample generate(std::size_t num_images, std::uint64_t seed, const std::string& prefix) const {
    Rng rng(seed);
    const double S = cfg_.image_size;
    std::vector<BoxRecord> records;
    std::vector<Vector> rows;

    auto add_region = [&](const Vector& latent) {
      rows.push_back(Vector(cfg_.feat_dim_x));
      detail::project(map_x_, latent, 0.0, rng, rows.back());
      return rows.size() - 1;
    };
    auto clip = [S](Box b) {
      b.x1 = std::clamp(b.x1, 0.0, S - 1.0);
      b.y1 = std::clamp(b.y1, 0.0, S - 1.0);
      b.x2 = std::clamp(b.x2, b.x1 + 1.0, S);
      b.y2 = std::clamp(b.y2, b.y1 + 1.0, S);
      return b;
    };

    for (std::size_t im = 0; im < num_images; ++im) {
      const std::string image_id = detail::numbered(prefix + "image_", im);
      const std::size_t n_obj = 1 + rng.below(cfg_.max_objects);
      std::vector<std::size_t> classes(cfg_.num_phrases);
      for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = c;
      rng.shuffle(classes);
      classes.resize(n_obj);
      std::vector<Box> objects;
      for (std::size_t o = 0; o < n_obj; ++o) {
        const double w = rng.uniform(0.2, 0.5) * S;
        const double h = rng.uniform(0.2, 0.5) * S;
        const double x1 = rng.uniform(0.0, S - w);
        const double y1 = rng.uniform(0.0, S - h);
        objects.push_back({x1, y1, x1 + w, y1 + h});
      }
      auto latent_for = [&](const Box& b) {
        double best = 0.0;
        std::size_t cls = 0;
        for (std::size_t o = 0; o < n_obj; ++o) {
          const double v = iou(b, objects[o]);
          if (v > best) {
            best = v;
            cls = classes[o];
          }
        }
        const Vector clutter = detail::random_unit(cfg_.latent_dim, rng);
        Vector z(cfg_.latent_dim);
        for (std::size_t k = 0; k < z.size(); ++k) {
          z[k] = best * phrase_latents_(cls, k) +
                 (1.0 - best) * (cfg_.background_weight * background_[k] +
                                 cfg_.clutter_weight * clutter[k]);
        }
        const double n = std::sqrt(squared_norm(z));
        for (double& v : z) v = v / n + cfg_.noise * rng.normal();
        return z;
      };

      for (std::size_t o = 0; o < n_obj; ++o) {
        Vector z(cfg_.latent_dim);
        for (std::size_t k = 0; k < z.size(); ++k)
          z[k] = phrase_latents_(classes[o], k) + cfg_.noise * rng.normal();
        records.push_back({image_id, 'G', phrases_.ids[classes[o]], objects[o], add_region(z)});
      }
      for (std::size_t o = 0; o < n_obj; ++o) {
        const Box& ob = objects[o];
        const double w = ob.x2 - ob.x1, h = ob.y2 - ob.y1;
        records.push_back({image_id, 'P', "-", ob, add_region(latent_for(ob))});
        for (std::size_t j = 0; j < cfg_.jittered_per_object; ++j) {
          const double sw = w * rng.uniform(0.5, 1.6), sh = h * rng.uniform(0.5, 1.6);
          const double cx = (ob.x1 + ob.x2) / 2 + rng.uniform(-0.45, 0.45) * w;
          const double cy = (ob.y1 + ob.y2) / 2 + rng.uniform(-0.45, 0.45) * h;
          const Box b = clip({cx - sw / 2, cy - sh / 2, cx + sw / 2, cy + sh / 2});
          records.push_back({image_id, 'P', "-", b, add_region(latent_for(b))});
        }
      }
      for (std::size_t j = 0; j < cfg_.background_boxes; ++j) {
        const double w = rng.uniform(0.1, 0.5) * S, h = rng.uniform(0.1, 0.5) * S;
        const double x1 = rng.uniform(0.0, S - w), y1 = rng.uniform(0.0, S - h);
        const Box b{x1, y1, x1 + w, y1 + h};
        records.push_back({image_id, 'P', "-", b, add_region(latent_for(b))});
      }
    }

    FeatureSet regions;
    regions.features = Matrix(rows.size(), cfg_.feat_dim_x);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy(rows[i].begin(), rows[i].end(), regions.features.row(i).begin());
      regions.ids.push_back(detail::numbered(prefix + "region_", i));
    }
    round_to_float(regions.features);
    Sample s;
    s.corpus = assemble_corpus(records, std::move(regions), phrases_);
    s.records = std::move(records);
    return s;
  }

 private:
  LocalizationSynthConfig cfg_;
  Matrix map_x_;
  Matrix map_y_;
  Matrix phrase_latents_;
  Vector background_;
  FeatureSet phrases_;
};

}  // namespace dspe
