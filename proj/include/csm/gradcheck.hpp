// End-to-end gradient check: central finite differences through the whole
// min-margin pipeline (query embedding, image network, margin loss) on a
// small double-precision two-tower model.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "csm/model.hpp"
#include "csm/objective.hpp"
#include "csm/random.hpp"
#include "csm/text_encoder.hpp"

namespace csm {

struct PipelineCheckResult {
  double max_rel_error = 0.0;
  int params_checked = 0;
  int params_skipped = 0;  // probes at non-differentiable points
  bool passed = false;
};

namespace detail {

struct PipelineFixture {
  TwoTowerModel<double> model;
  std::vector<Tensor<double>> images;
  std::vector<std::string> query_texts;
  std::vector<std::vector<int>> positives;
  std::vector<std::vector<int>> negatives;
};

inline PipelineFixture make_pipeline_fixture(int d, std::uint64_t seed) {
  PipelineFixture fx;
  fx.model.spec.layers = {ConvSpec{2, 3, 1, 1, true}, MaxPoolSpec{2, 2}, LcnSpec{},
                          FcSpec{6, true}, FcSpec{d, false}};
  fx.model.input_shape = {3, 8, 8};
  fx.model.net = init_params<double>(fx.model.spec, fx.model.input_shape,
                                     mix_seed(seed, stream_tag("net")), InitScheme::kHe);
  fx.model.vocab = Vocabulary({"apple", "brick", "cloud", "drum", "ember", "fern"});
  fx.model.idf.idf = {0.4, 0.7, 1.1, 0.9, 1.4, 0.2};
  fx.model.embedding = Tensor<double>({6, d});
  Rng rng(mix_seed(seed, stream_tag("emb")));
  for (auto& v : fx.model.embedding.data) v = rng.gaussian(0.0, 0.5);
  for (int i = 0; i < 3; ++i) {
    Tensor<double> img(fx.model.input_shape);
    Rng irng(mix_seed(seed, stream_tag("img"), i));
    for (auto& v : img.data) v = irng.uniform(0.0, 1.0);
    fx.images.push_back(std::move(img));
  }
  fx.query_texts = {"apple brick cloud", "drum ember"};
  fx.positives = {{0, 1}, {2}};
  fx.negatives = {{2}, {0, 1}};
  return fx;
}

// Batch-mean loss recomputed from scratch; the finite-difference objective.
inline double pipeline_loss(const PipelineFixture& fx) {
  std::vector<std::vector<double>> image_embs;
  for (const auto& img : fx.images) {
    image_embs.push_back(forward(fx.model.spec, fx.model.net, img).embedding);
  }
  std::vector<QueryEncoding<double>> encodings;
  for (const auto& text : fx.query_texts) {
    encodings.push_back(embed_query_text(text, fx.model.embedding, fx.model.idf, fx.model.vocab));
  }
  double loss = 0.0;
  for (std::size_t qi = 0; qi < fx.query_texts.size(); ++qi) {
    QueryBatchItem<double> item;
    item.query = &encodings[qi].vector;
    for (int p : fx.positives[qi]) {
      item.positive_ids.push_back(p);
      item.positive_embs.push_back(&image_embs[p]);
    }
    for (int n : fx.negatives[qi]) {
      item.negative_ids.push_back(n);
      item.negative_embs.push_back(&image_embs[n]);
    }
    loss -= static_cast<double>(margin(item).value);
  }
  return loss / static_cast<double>(fx.query_texts.size());
}

}  // namespace detail

// Compares analytic gradients (margin subgradient routed through both
// towers) against central differences over every parameter of the fixture.
inline PipelineCheckResult margin_pipeline_gradient_check(int d = 4, double tolerance = 1e-4,
                                                          std::uint64_t seed = 11) {
  auto fx = detail::make_pipeline_fixture(d, seed);

  // Analytic pass.
  std::vector<ForwardResult<double>> fwd;
  for (const auto& img : fx.images) fwd.push_back(forward(fx.model.spec, fx.model.net, img));
  std::vector<QueryEncoding<double>> encodings;
  for (const auto& text : fx.query_texts) {
    encodings.push_back(embed_query_text(text, fx.model.embedding, fx.model.idf, fx.model.vocab));
  }
  std::vector<QueryBatchItem<double>> items;
  for (std::size_t qi = 0; qi < fx.query_texts.size(); ++qi) {
    QueryBatchItem<double> item;
    item.query = &encodings[qi].vector;
    for (int p : fx.positives[qi]) {
      item.positive_ids.push_back(p);
      item.positive_embs.push_back(&fwd[p].embedding);
    }
    for (int n : fx.negatives[qi]) {
      item.negative_ids.push_back(n);
      item.negative_embs.push_back(&fwd[n].embedding);
    }
    items.push_back(std::move(item));
  }
  const auto grads = margin_loss_gradients(items);
  Tensor<double> grad_embedding(fx.model.embedding.shape);
  for (std::size_t qi = 0; qi < items.size(); ++qi) {
    for (const auto& [row, g] : embed_query_backward(encodings[qi], grads.query_grads[qi])) {
      for (int j = 0; j < d; ++j) {
        grad_embedding.data[static_cast<std::size_t>(row) * d + j] += g[j];
      }
    }
  }
  NetworkParams<double> grad_net;
  grad_net.layers.resize(fx.model.net.layers.size());
  for (std::size_t li = 0; li < fx.model.net.layers.size(); ++li) {
    if (!fx.model.net.layers[li].empty()) {
      grad_net.layers[li] = {Tensor<double>(fx.model.net.layers[li].weight.shape),
                             Tensor<double>(fx.model.net.layers[li].bias.shape)};
    }
  }
  for (const auto& [image, upstream] : grads.image_upstreams) {
    auto g = backward(fx.model.spec, fx.model.net, fwd[image].cache, upstream);
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

  // Numeric pass over every parameter.
  PipelineCheckResult result;
  const double h = 1e-4;
  auto probe = [&](Tensor<double>& theta, const Tensor<double>& analytic) {
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const auto estimate = fd_probe([&] { return detail::pipeline_loss(fx); }, theta[i], h);
      if (!estimate.smooth) {
        ++result.params_skipped;
        continue;
      }
      result.max_rel_error =
          std::max(result.max_rel_error, fd_rel_error(analytic[i], estimate.value));
      ++result.params_checked;
    }
  };
  for (std::size_t li = 0; li < fx.model.net.layers.size(); ++li) {
    if (fx.model.net.layers[li].empty()) continue;
    probe(fx.model.net.layers[li].weight, grad_net.layers[li].weight);
    probe(fx.model.net.layers[li].bias, grad_net.layers[li].bias);
  }
  probe(fx.model.embedding, grad_embedding);
  result.passed = result.max_rel_error < tolerance;
  return result;
}

}  // namespace csm
