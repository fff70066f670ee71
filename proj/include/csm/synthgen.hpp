// Synthetic clickthrough corpus. Each concept owns a shape/color rendering
// and a disjoint three-word token set; images render their concept with
// jittered geometry over a noisy canvas, queries draw words from their
// concept's set (plus shared noise words), and clicks connect matching
// concepts with high probability plus a spurious trickle across the rest.
// Relevance ground truth exists by construction.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "csm/errors.hpp"
#include "csm/io_util.hpp"
#include "csm/random.hpp"
#include "csm/tensor.hpp"
#include "json.hpp"

namespace csm {

enum class ConceptShape { kSquare, kCircle, kCross, kTriangle, kStripe };

inline const char* shape_name(ConceptShape s) {
  switch (s) {
    case ConceptShape::kSquare: return "square";
    case ConceptShape::kCircle: return "circle";
    case ConceptShape::kCross: return "cross";
    case ConceptShape::kTriangle: return "triangle";
    case ConceptShape::kStripe: return "stripe";
  }
  return "?";
}

struct ConceptSpec {
  int concept_id = 0;
  ConceptShape shape = ConceptShape::kSquare;
  std::array<double, 3> color{1.0, 0.0, 0.0};
  std::vector<std::string> word_set;  // 3 tokens, disjoint across concepts
};

struct GenerationConfig {
  int num_concepts = 8;
  int num_images = 400;
  int num_queries = 600;
  int image_size = 32;
  double click_prob = 0.9;
  double spurious_click_rate = 0.01;
  double noise_word_rate = 0.1;
  int num_noise_words = 10;

  void validate() const {
    if (num_concepts < 2) throw ConfigError("num_concepts must be >= 2");
    if (num_images < num_concepts) throw ConfigError("num_images must be >= num_concepts");
    if (num_queries < num_concepts) throw ConfigError("num_queries must be >= num_concepts");
    if (image_size < 16) throw ConfigError("image_size must be >= 16");
    if (click_prob < 0.0 || click_prob > 1.0) throw ConfigError("click_prob must be in [0,1]");
    if (spurious_click_rate < 0.0 || spurious_click_rate > 1.0) {
      throw ConfigError("spurious_click_rate must be in [0,1]");
    }
    if (noise_word_rate < 0.0 || noise_word_rate > 1.0) {
      throw ConfigError("noise_word_rate must be in [0,1]");
    }
    if (num_noise_words < 1) throw ConfigError("num_noise_words must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const GenerationConfig& c) {
  j = nlohmann::json{{"num_concepts", c.num_concepts},
                     {"num_images", c.num_images},
                     {"num_queries", c.num_queries},
                     {"image_size", c.image_size},
                     {"click_prob", c.click_prob},
                     {"spurious_click_rate", c.spurious_click_rate},
                     {"noise_word_rate", c.noise_word_rate},
                     {"num_noise_words", c.num_noise_words}};
}

inline void from_json(const nlohmann::json& j, GenerationConfig& c) {
  static const std::vector<std::string> known = {
      "num_concepts",  "num_images",          "num_queries",     "image_size",
      "click_prob",    "spurious_click_rate", "noise_word_rate", "num_noise_words"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      throw ConfigError("unknown generation config field '" + it.key() + "'");
    }
  }
  c.num_concepts = j.value("num_concepts", c.num_concepts);
  c.num_images = j.value("num_images", c.num_images);
  c.num_queries = j.value("num_queries", c.num_queries);
  c.image_size = j.value("image_size", c.image_size);
  c.click_prob = j.value("click_prob", c.click_prob);
  c.spurious_click_rate = j.value("spurious_click_rate", c.spurious_click_rate);
  c.noise_word_rate = j.value("noise_word_rate", c.noise_word_rate);
  c.num_noise_words = j.value("num_noise_words", c.num_noise_words);
}

inline std::string generation_config_digest(const GenerationConfig& c) {
  const std::string dump = nlohmann::json(c).dump();
  return hex64(fnv1a64(dump.data(), dump.size()));
}

// Relevance levels: 3 same concept, 2 shared shape or color, 0 otherwise.
inline int ground_truth_relevance(const ConceptSpec& query_concept,
                                  const ConceptSpec& image_concept) {
  if (query_concept.concept_id == image_concept.concept_id) return 3;
  if (query_concept.shape == image_concept.shape || query_concept.color == image_concept.color) {
    return 2;
  }
  return 0;
}

namespace detail {

inline std::array<double, 3> concept_palette(int index) {
  static const std::array<std::array<double, 3>, 6> palette = {{
      {1.0, 0.1, 0.1},   // red
      {0.1, 0.8, 0.1},   // green
      {0.15, 0.25, 1.0}, // blue
      {1.0, 0.85, 0.1},  // yellow
      {0.9, 0.15, 0.9},  // magenta
      {0.1, 0.8, 0.85},  // cyan
  }};
  return palette[index % palette.size()];
}

inline std::string concept_token(int concept_id, int word_index) {
  std::string id = std::to_string(concept_id);
  while (id.size() < 2) id.insert(id.begin(), '0');
  return "w" + id + std::string(1, static_cast<char>('a' + word_index));
}

inline bool inside_shape(ConceptShape shape, double dx, double dy, double r) {
  switch (shape) {
    case ConceptShape::kSquare:
      return std::abs(dx) < r && std::abs(dy) < r;
    case ConceptShape::kCircle:
      return dx * dx + dy * dy < r * r;
    case ConceptShape::kCross:
      return (std::abs(dx) < r / 3.0 && std::abs(dy) < r) ||
             (std::abs(dy) < r / 3.0 && std::abs(dx) < r);
    case ConceptShape::kTriangle:
      // Apex up: width grows linearly from the top vertex to the base.
      return dy > -r && dy < r && std::abs(dx) < (dy + r) / 2.0;
    case ConceptShape::kStripe: {
      const double inv_sqrt2 = 0.7071067811865476;
      return std::abs(dx * inv_sqrt2 + dy * inv_sqrt2) < r / 3.0 && std::abs(dx) < r &&
             std::abs(dy) < r;
    }
  }
  return false;
}

}  // namespace detail

inline std::vector<ConceptSpec> make_concepts(int num_concepts) {
  std::vector<ConceptSpec> concepts;
  concepts.reserve(num_concepts);
  for (int c = 0; c < num_concepts; ++c) {
    ConceptSpec spec;
    spec.concept_id = c;
    spec.shape = static_cast<ConceptShape>(c % 5);
    spec.color = detail::concept_palette(c);
    for (int w = 0; w < 3; ++w) spec.word_set.push_back(detail::concept_token(c, w));
    concepts.push_back(std::move(spec));
  }
  return concepts;
}

// 3 x size x size, values in [0,1]. Geometry jitters per seed; Gaussian noise
// (std 0.05) is added everywhere and the result clamped.
inline Tensor<float> render_image(const ConceptSpec& subject, int size, std::uint64_t seed) {
  if (size < 16) throw ConfigError("image_size must be >= 16");
  Rng rng(seed);
  const double cx = size / 2.0 + rng.uniform(-size / 8.0, size / 8.0);
  const double cy = size / 2.0 + rng.uniform(-size / 8.0, size / 8.0);
  const double r = rng.uniform(0.22, 0.38) * size;
  Tensor<float> img({3, size, size});
  const double background = 0.35;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const bool hit = detail::inside_shape(subject.shape, x + 0.5 - cx, y + 0.5 - cy, r);
      for (int ch = 0; ch < 3; ++ch) {
        double v = hit ? subject.color[ch] : background;
        v += rng.gaussian(0.0, 0.05);
        img.at(ch, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

struct SyntheticDataset {
  GenerationConfig config;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::vector<ConceptSpec> concepts;
  std::vector<int> image_concept;
  std::vector<Tensor<float>> images;
  std::vector<int> query_concept;
  std::vector<std::string> query_texts;
  std::vector<std::pair<int, int>> clicks;  // (image index, query index)
  std::vector<char> click_spurious;         // aligned with clicks

  int relevance(int query, int image) const {
    return ground_truth_relevance(concepts[query_concept[query]],
                                  concepts[image_concept[image]]);
  }
};

inline SyntheticDataset generate_dataset(const GenerationConfig& config, std::uint64_t seed) {
  config.validate();
  SyntheticDataset ds;
  ds.config = config;
  ds.seed = seed;
  ds.config_digest = generation_config_digest(config);
  ds.concepts = make_concepts(config.num_concepts);

  std::vector<std::string> noise_words;
  for (int i = 0; i < config.num_noise_words; ++i) {
    noise_words.push_back("noise" + std::to_string(i));
  }

  ds.image_concept.resize(config.num_images);
  ds.images.reserve(config.num_images);
  for (int i = 0; i < config.num_images; ++i) {
    ds.image_concept[i] = i % config.num_concepts;
    ds.images.push_back(render_image(ds.concepts[ds.image_concept[i]], config.image_size,
                                     mix_seed(seed, stream_tag("image"), i)));
  }

  ds.query_concept.resize(config.num_queries);
  ds.query_texts.reserve(config.num_queries);
  for (int q = 0; q < config.num_queries; ++q) {
    ds.query_concept[q] = q % config.num_concepts;
    Rng rng(mix_seed(seed, stream_tag("query"), q));
    const int length = 1 + static_cast<int>(rng.uniform_below(3));
    std::string text;
    for (int w = 0; w < length; ++w) {
      if (w) text += ' ';
      if (rng.uniform01() < config.noise_word_rate) {
        text += noise_words[rng.uniform_below(noise_words.size())];
      } else {
        const auto& words = ds.concepts[ds.query_concept[q]].word_set;
        text += words[rng.uniform_below(words.size())];
      }
    }
    ds.query_texts.push_back(std::move(text));
  }

  for (int q = 0; q < config.num_queries; ++q) {
    Rng rng(mix_seed(seed, stream_tag("click"), q));
    for (int i = 0; i < config.num_images; ++i) {
      const double u = rng.uniform01();
      if (ds.query_concept[q] == ds.image_concept[i]) {
        if (u < config.click_prob) {
          ds.clicks.emplace_back(i, q);
          ds.click_spurious.push_back(0);
        }
      } else if (u < config.spurious_click_rate) {
        ds.clicks.emplace_back(i, q);
        ds.click_spurious.push_back(1);
      }
    }
  }
  return ds;
}

}  // namespace csm
