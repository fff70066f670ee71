// Momentum SGD over batches of queries:
//     v <- alpha*v - beta*eps*theta - eps*g,   theta <- theta + v
// followed by the norm projection, with a plateau learning-rate schedule
// driven by the mean margin on a validation split.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "csm/clickgraph.hpp"
#include "csm/errors.hpp"
#include "csm/model.hpp"
#include "csm/objective.hpp"
#include "csm/random.hpp"
#include "json.hpp"

namespace csm {

enum class ProjectionMode { kGlobal, kPerLayer };

struct TrainerConfig {
  int batch_size_queries = 128;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  double initial_lr = 0.01;
  double lr_decay_factor = 10.0;
  int plateau_patience = 3;
  double plateau_min_delta = 1e-4;
  int max_epochs = 30;
  int negatives_per_query = 5;
  int positives_cap = 4;
  std::uint64_t seed = 0;
  double norm_radius = 1.0;
  ProjectionMode projection = ProjectionMode::kGlobal;
  InitScheme init_scheme = InitScheme::kFixedStd;
  double init_std = 0.01;
  double embedding_init_std = 0.1;
  double validation_fraction = 0.1;
  int holdout_queries = 0;  // trailing queries excluded from training entirely
  int vocab_size = 50000;
  int embedding_dim = 64;
  int eval_every_epochs = 1;

  void validate() const {
    if (batch_size_queries < 1) throw ConfigError("batch_size_queries must be >= 1");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (initial_lr <= 0.0) throw ConfigError("initial_lr must be positive");
    if (lr_decay_factor <= 1.0) throw ConfigError("lr_decay_factor must be > 1");
    if (plateau_patience < 1) throw ConfigError("plateau_patience must be >= 1");
    if (plateau_min_delta < 0.0) throw ConfigError("plateau_min_delta must be >= 0");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (negatives_per_query < 1) throw ConfigError("negatives_per_query must be >= 1");
    if (positives_cap < 1) throw ConfigError("positives_cap must be >= 1");
    if (norm_radius <= 0.0) throw ConfigError("norm_radius must be positive");
    if (init_std <= 0.0) throw ConfigError("init_std must be positive");
    if (embedding_init_std <= 0.0) throw ConfigError("embedding_init_std must be positive");
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
      throw ConfigError("validation_fraction must be in [0,1)");
    }
    if (holdout_queries < 0) throw ConfigError("holdout_queries must be >= 0");
    if (vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
    if (embedding_dim < 1) throw ConfigError("embedding_dim must be >= 1");
    if (eval_every_epochs < 1) throw ConfigError("eval_every_epochs must be >= 1");
  }
};

template <typename T>
struct MomentumState {
  NetworkParams<T> net;
  Tensor<T> embedding;

  static MomentumState zeros_like(const NetworkParams<T>& net_params,
                                  const Tensor<T>& embedding_table) {
    MomentumState s;
    s.net.layers.reserve(net_params.layers.size());
    for (const auto& l : net_params.layers) {
      s.net.layers.push_back({Tensor<T>(l.weight.shape), Tensor<T>(l.bias.shape)});
    }
    s.embedding = Tensor<T>(embedding_table.shape);
    return s;
  }
};

namespace detail {
// Elementwise Eq-style momentum update on one tensor.
template <typename T>
void momentum_update(Tensor<T>& theta, Tensor<T>& v, const Tensor<T>& g, double lr,
                     double momentum, double weight_decay) {
  const T a = static_cast<T>(momentum);
  const T be = static_cast<T>(weight_decay * lr);
  const T e = static_cast<T>(lr);
  for (std::size_t i = 0; i < theta.data.size(); ++i) {
    v.data[i] = a * v.data[i] - be * theta.data[i] - e * g.data[i];
    theta.data[i] += v.data[i];
  }
}

template <typename T>
void check_finite_grads(const NetworkParams<T>& gnet, const Tensor<T>& gemb) {
  for (std::size_t li = 0; li < gnet.layers.size(); ++li) {
    double norm_sq = 0.0;
    bool bad = false;
    auto scan = [&](const Tensor<T>& t) {
      for (const T& x : t.data) {
        const double v = static_cast<double>(x);
        if (!std::isfinite(v)) bad = true;
        norm_sq += v * v;
      }
    };
    scan(gnet.layers[li].weight);
    scan(gnet.layers[li].bias);
    if (bad || !std::isfinite(norm_sq)) {
      throw NumericError("non-finite gradient in network layer " + std::to_string(li) +
                         " (norm^2 so far " + std::to_string(norm_sq) + ")");
    }
  }
  for (const T& x : gemb.data) {
    if (!std::isfinite(static_cast<double>(x))) {
      throw NumericError("non-finite gradient in the word embedding table");
    }
  }
}
}  // namespace detail

// One optimizer step over theta = {theta_i, theta_q}, then the norm
// projection per component (or per layer when configured).
template <typename T>
void sgd_step(NetworkParams<T>& net, Tensor<T>& embedding, MomentumState<T>& state,
              const NetworkParams<T>& grad_net, const Tensor<T>& grad_embedding, double lr,
              const TrainerConfig& cfg) {
  detail::check_finite_grads(grad_net, grad_embedding);
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    if (net.layers[li].empty()) continue;
    detail::momentum_update(net.layers[li].weight, state.net.layers[li].weight,
                            grad_net.layers[li].weight, lr, cfg.momentum, cfg.weight_decay);
    detail::momentum_update(net.layers[li].bias, state.net.layers[li].bias,
                            grad_net.layers[li].bias, lr, cfg.momentum, cfg.weight_decay);
  }
  detail::momentum_update(embedding, state.embedding, grad_embedding, lr, cfg.momentum,
                          cfg.weight_decay);
  if (cfg.projection == ProjectionMode::kGlobal) {
    std::vector<Tensor<T>*> image_tensors;
    net.for_each_tensor([&](Tensor<T>& t) { image_tensors.push_back(&t); });
    project_norm(image_tensors, cfg.norm_radius);
  } else {
    net.for_each_tensor([&](Tensor<T>& t) { project_norm<T>({&t}, cfg.norm_radius); });
  }
  project_norm<T>({&embedding}, cfg.norm_radius);
}

struct EvalRecord {
  int epoch = 0;
  double mean_train_margin = 0.0;
  double mean_validation_margin = 0.0;
  double learning_rate = 0.0;
  double wall_time_s = 0.0;
};

using TrainingHistory = std::vector<EvalRecord>;

struct LrDecision {
  double lr = 0.0;
  bool stop = false;
  int decays = 0;
};

// Replays the validation margins: when the best margin has not improved by
// min_delta for `patience` consecutive evaluations the rate divides by the
// decay factor; after three decays the next plateau stops training.
inline LrDecision lr_schedule(const std::vector<double>& validation_margins,
                              const TrainerConfig& cfg) {
  if (validation_margins.empty()) throw ContractError("lr_schedule requires a nonempty history");
  LrDecision d{cfg.initial_lr, false, 0};
  double best = -std::numeric_limits<double>::infinity();
  int since_improve = 0;
  for (double m : validation_margins) {
    if (m > best + cfg.plateau_min_delta) {
      best = m;
      since_improve = 0;
      continue;
    }
    ++since_improve;
    if (since_improve >= cfg.plateau_patience) {
      if (d.decays >= 3) {
        d.stop = true;
        return d;
      }
      d.lr /= cfg.lr_decay_factor;
      ++d.decays;
      since_improve = 0;
    }
  }
  return d;
}

// In-memory training view: dense image/query indices, texts, and clicks.
struct TrainData {
  std::vector<Tensor<float>> images;       // dense image index -> tensor
  std::vector<std::string> query_texts;    // dense query index -> raw text
  std::vector<std::pair<int, int>> clicks; // (image index, query index)
};

namespace detail {

// Embeds every distinct image of a batch exactly once, in first-appearance
// order so float accumulation is reproducible. Slots are heap-stable; the
// returned references survive later insertions.
template <typename T>
class BatchImageCache {
 public:
  BatchImageCache(const NetworkSpec& spec, const NetworkParams<T>& net,
                  const std::vector<Tensor<T>>& images)
      : spec_(spec), net_(net), images_(images) {}

  const std::vector<T>& embedding(int image) {
    auto it = slot_of_.find(image);
    if (it == slot_of_.end()) {
      slots_.push_back(std::make_unique<ForwardResult<T>>(forward(spec_, net_, images_[image])));
      order_.push_back(image);
      it = slot_of_.emplace(image, slots_.size() - 1).first;
    }
    return slots_[it->second]->embedding;
  }

  const ActivationCache<T>& cache_for(int image) const {
    return slots_[slot_of_.at(image)]->cache;
  }

  const std::vector<int>& order() const { return order_; }

 private:
  const NetworkSpec& spec_;
  const NetworkParams<T>& net_;
  const std::vector<Tensor<T>>& images_;
  std::map<int, std::size_t> slot_of_;
  std::vector<std::unique_ptr<ForwardResult<T>>> slots_;
  std::vector<int> order_;
};

}  // namespace detail

struct TrainOutput {
  TwoTowerModel<float> model;
  TrainingHistory history;
  std::uint64_t negative_fallbacks = 0;  // times the M2 filter was waived
};

// Mean margin over the validation queries with positives from the click
// matrix and negatives freshly sampled from the fixed evaluation seed, so
// successive evaluations see the same triples.
template <typename T>
double validation_margin(const TwoTowerModel<T>& model, const std::vector<Tensor<T>>& images,
                         const std::vector<int>& validation_queries,
                         const std::vector<std::string>& query_texts, const ClickMatrix& clicks,
                         const RelationMatrix& m2, int negatives_per_query, std::uint64_t seed) {
  detail::BatchImageCache<T> cache(model.spec, model.net, images);
  double total = 0.0;
  int counted = 0;
  for (int q : validation_queries) {
    const auto& positives = clicks.images_of(q);
    if (positives.empty()) continue;
    const auto enc = embed_query_text(query_texts[q], model.embedding, model.idf, model.vocab);
    if (enc.oov) continue;
    const auto eligible = eligible_negatives(clicks, m2, q);
    const auto negs = sample_negatives(eligible, clicks.unclicked_images(q), negatives_per_query,
                                       mix_seed(seed, stream_tag("valneg"), q));
    if (negs.images.empty()) continue;
    QueryBatchItem<T> item;
    item.query = &enc.vector;
    for (int p : positives) {
      item.positive_ids.push_back(p);
      item.positive_embs.push_back(&cache.embedding(p));
    }
    for (int n : negs.images) {
      item.negative_ids.push_back(n);
      item.negative_embs.push_back(&cache.embedding(n));
    }
    total += static_cast<double>(margin(item).value);
    ++counted;
  }
  return counted ? total / counted : 0.0;
}

// Full training loop. Deterministic given the config seed: shuffles, positive
// caps, negative draws, and parameter initialization all derive from it.
inline TrainOutput train(const TrainData& data, const TrainerConfig& cfg,
                         const NetworkSpec& network) {
  cfg.validate();
  if (data.images.empty()) throw DataError("training data has no images");
  if (data.query_texts.empty()) throw DataError("training data has no queries");
  const int num_queries = static_cast<int>(data.query_texts.size());
  const int num_images = static_cast<int>(data.images.size());
  if (cfg.holdout_queries >= num_queries) {
    throw ConfigError("holdout_queries leaves no training queries");
  }
  const int usable_queries = num_queries - cfg.holdout_queries;

  // Clicks restricted to the non-holdout queries.
  std::vector<std::pair<int, int>> kept_clicks;
  for (const auto& [i, q] : data.clicks) {
    if (q < usable_queries) kept_clicks.emplace_back(i, q);
  }
  ClickMatrix clicks(num_images, usable_queries, kept_clicks);
  const auto m1 = first_order_matrix(clicks);
  const auto m2 = second_order_matrix(m1);

  // Validation split: a seeded sample of the usable queries.
  std::vector<int> usable(usable_queries);
  for (int q = 0; q < usable_queries; ++q) usable[q] = q;
  const int val_count = static_cast<int>(usable_queries * cfg.validation_fraction);
  auto val_sample = sample_without_replacement(usable, static_cast<std::size_t>(val_count),
                                               mix_seed(cfg.seed, stream_tag("valsplit")));
  std::sort(val_sample.begin(), val_sample.end());
  std::vector<char> is_validation(usable_queries, 0);
  for (int q : val_sample) is_validation[q] = 1;
  std::vector<int> train_queries;
  for (int q = 0; q < usable_queries; ++q) {
    if (!is_validation[q]) train_queries.push_back(q);
  }
  if (static_cast<int>(train_queries.size()) < cfg.batch_size_queries) {
    throw DataError("train split has " + std::to_string(train_queries.size()) +
                    " queries, fewer than one batch of " +
                    std::to_string(cfg.batch_size_queries));
  }

  // Query tower statistics come from the training split only.
  std::vector<std::string> train_corpus;
  train_corpus.reserve(train_queries.size());
  for (int q : train_queries) train_corpus.push_back(data.query_texts[q]);
  TwoTowerModel<float> model;
  model.spec = network;
  model.input_shape = data.images.front().shape;
  model.vocab = build_vocabulary(train_corpus, cfg.vocab_size);
  model.idf = compute_idf(train_corpus, model.vocab);
  model.net = init_params<float>(network, model.input_shape, cfg.seed, cfg.init_scheme,
                                 cfg.init_std);
  model.embedding = Tensor<float>({model.vocab.size(), cfg.embedding_dim});
  {
    Rng rng(mix_seed(cfg.seed, stream_tag("embed-init")));
    for (auto& v : model.embedding.data) {
      v = static_cast<float>(rng.gaussian(0.0, cfg.embedding_init_std));
    }
  }
  if (output_dim(network, model.input_shape) != cfg.embedding_dim) {
    throw ConfigError("network output dimension " +
                      std::to_string(output_dim(network, model.input_shape)) +
                      " does not match embedding_dim " + std::to_string(cfg.embedding_dim));
  }

  // Untrainable data check: at least one query must have a click and an
  // unclicked image to pair against.
  {
    bool trainable = false;
    for (int q : train_queries) {
      if (!clicks.images_of(q).empty() &&
          static_cast<int>(clicks.images_of(q).size()) < num_images) {
        trainable = true;
        break;
      }
    }
    if (!trainable) {
      throw DataError("no training query has both clicked and unclicked images");
    }
  }

  auto state = MomentumState<float>::zeros_like(model.net, model.embedding);
  TrainOutput out;
  out.model = std::move(model);
  std::vector<double> validation_margins;
  double lr = cfg.initial_lr;
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t eval_seed = mix_seed(cfg.seed, stream_tag("eval"));

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::vector<int> order = train_queries;
    Rng shuffle_rng(mix_seed(cfg.seed, stream_tag("shuffle"), epoch));
    shuffle_rng.shuffle(order);

    double margin_sum = 0.0;
    std::size_t margin_count = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size_queries) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size_queries);
      detail::BatchImageCache<float> image_cache(out.model.spec, out.model.net, data.images);
      std::vector<QueryEncoding<float>> encodings;
      std::vector<QueryBatchItem<float>> items;
      encodings.reserve(stop - start);
      for (std::size_t bi = start; bi < stop; ++bi) {
        const int q = order[bi];
        const auto& positives_all = clicks.images_of(q);
        if (positives_all.empty()) continue;
        auto enc = embed_query_text(data.query_texts[q], out.model.embedding, out.model.idf,
                                    out.model.vocab);
        if (enc.oov) continue;
        std::vector<int> positives = positives_all;
        if (static_cast<int>(positives.size()) > cfg.positives_cap) {
          positives = sample_without_replacement(
              positives, static_cast<std::size_t>(cfg.positives_cap),
              mix_seed(cfg.seed, stream_tag("pos"), epoch, q));
          std::sort(positives.begin(), positives.end());
        }
        const auto eligible = eligible_negatives(clicks, m2, q);
        const auto negs =
            sample_negatives(eligible, clicks.unclicked_images(q), cfg.negatives_per_query,
                             mix_seed(cfg.seed, stream_tag("neg"), epoch, q));
        if (negs.fallback_used) ++out.negative_fallbacks;
        if (negs.images.empty()) continue;
        encodings.push_back(std::move(enc));
        QueryBatchItem<float> item;
        item.positive_ids = positives;
        item.negative_ids = negs.images;
        items.push_back(std::move(item));
      }
      if (items.empty()) continue;
      // Embedding pointers are taken after the encoding vector stops growing.
      for (std::size_t ii = 0; ii < items.size(); ++ii) {
        items[ii].query = &encodings[ii].vector;
        for (int p : items[ii].positive_ids) {
          items[ii].positive_embs.push_back(&image_cache.embedding(p));
        }
        for (int n : items[ii].negative_ids) {
          items[ii].negative_embs.push_back(&image_cache.embedding(n));
        }
      }
      auto grads = margin_loss_gradients(items);
      for (const auto& m : grads.margins) {
        margin_sum += static_cast<double>(m.value);
        ++margin_count;
      }
      // Query tower gradients land on embedding rows.
      Tensor<float> grad_embedding(out.model.embedding.shape);
      const int d = cfg.embedding_dim;
      for (std::size_t ii = 0; ii < items.size(); ++ii) {
        const auto row_grads = embed_query_backward(encodings[ii], grads.query_grads[ii]);
        for (const auto& [row, g] : row_grads) {
          float* dst = grad_embedding.data.data() + static_cast<std::size_t>(row) * d;
          for (int j = 0; j < d; ++j) dst[j] += g[j];
        }
      }
      // Image tower gradients: one backward pass per touched image with its
      // accumulated upstream, in the cache's first-appearance order.
      NetworkParams<float> grad_net;
      grad_net.layers.resize(out.model.net.layers.size());
      for (std::size_t li = 0; li < out.model.net.layers.size(); ++li) {
        if (!out.model.net.layers[li].empty()) {
          grad_net.layers[li] = {Tensor<float>(out.model.net.layers[li].weight.shape),
                                 Tensor<float>(out.model.net.layers[li].bias.shape)};
        }
      }
      for (int image : image_cache.order()) {
        auto it = grads.image_upstreams.find(image);
        if (it == grads.image_upstreams.end()) continue;
        auto g = backward(out.model.spec, out.model.net, image_cache.cache_for(image),
                          it->second);
        for (std::size_t li = 0; li < grad_net.layers.size(); ++li) {
          if (grad_net.layers[li].empty()) continue;
          for (std::size_t i = 0; i < grad_net.layers[li].weight.size(); ++i) {
            grad_net.layers[li].weight[i] += g.layers[li].weight[i];
          }
          for (std::size_t i = 0; i < grad_net.layers[li].bias.size(); ++i) {
            grad_net.layers[li].bias[i] += g.layers[li].bias[i];
          }
        }
      }
      sgd_step(out.model.net, out.model.embedding, state, grad_net, grad_embedding, lr, cfg);
    }

    if ((epoch + 1) % cfg.eval_every_epochs == 0 || epoch + 1 == cfg.max_epochs) {
      const double val_margin =
          validation_margin(out.model, data.images, val_sample, data.query_texts, clicks, m2,
                            cfg.negatives_per_query, eval_seed);
      validation_margins.push_back(val_margin);
      EvalRecord rec;
      rec.epoch = epoch;
      rec.mean_train_margin = margin_count ? margin_sum / margin_count : 0.0;
      rec.mean_validation_margin = val_margin;
      rec.learning_rate = lr;
      rec.wall_time_s =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out.history.push_back(rec);
      const auto decision = lr_schedule(validation_margins, cfg);
      lr = decision.lr;
      if (decision.stop) break;
    }
  }
  return out;
}

// --- TrainerConfig JSON ------------------------------------------------------

inline void to_json(nlohmann::json& j, const TrainerConfig& c) {
  j = nlohmann::json{{"batch_size_queries", c.batch_size_queries},
                     {"momentum", c.momentum},
                     {"weight_decay", c.weight_decay},
                     {"initial_lr", c.initial_lr},
                     {"lr_decay_factor", c.lr_decay_factor},
                     {"plateau_patience", c.plateau_patience},
                     {"plateau_min_delta", c.plateau_min_delta},
                     {"max_epochs", c.max_epochs},
                     {"negatives_per_query", c.negatives_per_query},
                     {"positives_cap", c.positives_cap},
                     {"seed", c.seed},
                     {"norm_radius", c.norm_radius},
                     {"projection", c.projection == ProjectionMode::kGlobal ? "global" : "per_layer"},
                     {"init_scheme", c.init_scheme == InitScheme::kFixedStd ? "fixed" : "he"},
                     {"init_std", c.init_std},
                     {"embedding_init_std", c.embedding_init_std},
                     {"validation_fraction", c.validation_fraction},
                     {"holdout_queries", c.holdout_queries},
                     {"vocab_size", c.vocab_size},
                     {"embedding_dim", c.embedding_dim},
                     {"eval_every_epochs", c.eval_every_epochs}};
}

inline void from_json(const nlohmann::json& j, TrainerConfig& c) {
  static const std::vector<std::string> known = {
      "batch_size_queries", "momentum",           "weight_decay",       "initial_lr",
      "lr_decay_factor",    "plateau_patience",   "plateau_min_delta",  "max_epochs",
      "negatives_per_query", "positives_cap",     "seed",               "norm_radius",
      "projection",         "init_scheme",        "init_std",           "embedding_init_std",
      "validation_fraction", "holdout_queries",   "vocab_size",         "embedding_dim",
      "eval_every_epochs"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      throw ConfigError("unknown trainer config field '" + it.key() + "'");
    }
  }
  c.batch_size_queries = j.value("batch_size_queries", c.batch_size_queries);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.initial_lr = j.value("initial_lr", c.initial_lr);
  c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
  c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
  c.plateau_min_delta = j.value("plateau_min_delta", c.plateau_min_delta);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.negatives_per_query = j.value("negatives_per_query", c.negatives_per_query);
  c.positives_cap = j.value("positives_cap", c.positives_cap);
  c.seed = j.value("seed", c.seed);
  c.norm_radius = j.value("norm_radius", c.norm_radius);
  if (j.contains("projection")) {
    const std::string p = j.at("projection").get<std::string>();
    if (p == "global") {
      c.projection = ProjectionMode::kGlobal;
    } else if (p == "per_layer") {
      c.projection = ProjectionMode::kPerLayer;
    } else {
      throw ConfigError("projection must be 'global' or 'per_layer', got '" + p + "'");
    }
  }
  if (j.contains("init_scheme")) {
    const std::string s = j.at("init_scheme").get<std::string>();
    if (s == "fixed") {
      c.init_scheme = InitScheme::kFixedStd;
    } else if (s == "he") {
      c.init_scheme = InitScheme::kHe;
    } else {
      throw ConfigError("init_scheme must be 'fixed' or 'he', got '" + s + "'");
    }
  }
  c.init_std = j.value("init_std", c.init_std);
  c.embedding_init_std = j.value("embedding_init_std", c.embedding_init_std);
  c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
  c.holdout_queries = j.value("holdout_queries", c.holdout_queries);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.eval_every_epochs = j.value("eval_every_epochs", c.eval_every_epochs);
}

}  // namespace csm
