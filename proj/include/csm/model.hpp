// The two-tower model: shared embedding space between the image network and
// the word-embedding table.
#pragma once

#include <string>
#include <vector>

#include "csm/image_encoder.hpp"
#include "csm/tensor.hpp"
#include "csm/text_encoder.hpp"

namespace csm {

template <typename T>
struct TwoTowerModel {
  NetworkSpec spec;
  std::vector<int> input_shape;  // channels x height x width
  NetworkParams<T> net;          // theta_i
  Tensor<T> embedding;           // theta_q, vocab size x d
  Vocabulary vocab;
  IdfTable idf;

  int dim() const { return embedding.shape.size() == 2 ? embedding.shape[1] : 0; }

  QueryEncoding<T> encode_query(const std::string& text) const {
    return embed_query_text(text, embedding, idf, vocab);
  }

  std::vector<T> encode_image(const Tensor<T>& image) const {
    return forward(spec, net, image).embedding;
  }

  template <typename U>
  TwoTowerModel<U> cast() const {
    TwoTowerModel<U> out;
    out.spec = spec;
    out.input_shape = input_shape;
    out.net = net.template cast<U>();
    out.embedding = embedding.template cast<U>();
    out.vocab = vocab;
    out.idf = idf;
    return out;
  }
};

}  // namespace csm
