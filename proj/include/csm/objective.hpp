// Training objective: inner-product similarity, the per-query margin
//     m(Q) = min over (I+, I-) of S(I+,Q) - S(I-,Q) = (min+ S) - (max- S),
// the batch loss L = sum_Q -m(Q), its subgradients through the argmin pair,
// and the parameter-norm projection.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "csm/errors.hpp"
#include "csm/tensor.hpp"

namespace csm {

template <typename T>
T similarity(const std::vector<T>& f, const std::vector<T>& w) {
  if (f.size() != w.size()) {
    throw ContractError("similarity dimension mismatch: " + std::to_string(f.size()) + " vs " +
                        std::to_string(w.size()));
  }
  T acc = T(0);
  for (std::size_t i = 0; i < f.size(); ++i) acc += f[i] * w[i];
  return acc;
}

// One query's contribution to a batch. Embedding pointers refer to vectors
// owned by the batch assembler; ids are dense image indices used for
// deterministic tie-breaking and for routing gradients.
template <typename T>
struct QueryBatchItem {
  const std::vector<T>* query = nullptr;  // W(Q)
  std::vector<int> positive_ids;
  std::vector<const std::vector<T>*> positive_embs;
  std::vector<int> negative_ids;
  std::vector<const std::vector<T>*> negative_embs;
};

template <typename T>
struct MarginResult {
  T value = T(0);
  int argmin_positive = -1;
  int argmax_negative = -1;
};

// Ties resolve to the lowest positive id, then the lowest negative id,
// independent of list order.
template <typename T>
MarginResult<T> margin(const QueryBatchItem<T>& item) {
  if (item.query == nullptr) throw ContractError("margin: missing query encoding");
  if (item.positive_embs.empty() || item.negative_embs.empty()) {
    throw ContractError("margin requires at least one positive and one negative image");
  }
  T min_pos = T(0);
  int min_pos_id = -1;
  for (std::size_t i = 0; i < item.positive_embs.size(); ++i) {
    const T s = similarity(*item.positive_embs[i], *item.query);
    const int id = item.positive_ids[i];
    if (min_pos_id < 0 || s < min_pos || (s == min_pos && id < min_pos_id)) {
      min_pos = s;
      min_pos_id = id;
    }
  }
  T max_neg = T(0);
  int max_neg_id = -1;
  for (std::size_t i = 0; i < item.negative_embs.size(); ++i) {
    const T s = similarity(*item.negative_embs[i], *item.query);
    const int id = item.negative_ids[i];
    if (max_neg_id < 0 || s > max_neg || (s == max_neg && id < max_neg_id)) {
      max_neg = s;
      max_neg_id = id;
    }
  }
  return {min_pos - max_neg, min_pos_id, max_neg_id};
}

template <typename T>
T batch_loss(const std::vector<QueryBatchItem<T>>& items) {
  if (items.empty()) throw ContractError("batch_loss on an empty batch");
  T loss = T(0);
  for (const auto& item : items) loss -= margin(item).value;
  return loss;
}

// Subgradients of the batch-mean loss. The image tower's share is expressed
// as one upstream vector per touched image (to be pushed through the network
// backward pass); the query tower's share is the gradient on each W(Q)
// (to be pushed through embed_query_backward). Per query only the argmin
// pair carries gradient:
//   dL/dW(Q)    = -(F(I+*) - F(I-*))
//   dL/dF(I+*)  = -W(Q)
//   dL/dF(I-*)  = +W(Q)
// All contributions are divided by the batch size.
template <typename T>
struct MarginLossGradients {
  std::vector<std::vector<T>> query_grads;     // aligned with items
  std::map<int, std::vector<T>> image_upstreams;  // dense image id -> dL/dF(I)
  std::vector<MarginResult<T>> margins;        // aligned with items
  T loss = T(0);
};

template <typename T>
MarginLossGradients<T> margin_loss_gradients(const std::vector<QueryBatchItem<T>>& items) {
  if (items.empty()) throw ContractError("margin_loss_gradients on an empty batch");
  MarginLossGradients<T> out;
  out.query_grads.resize(items.size());
  out.margins.reserve(items.size());
  const T scale = T(1) / static_cast<T>(items.size());
  for (std::size_t qi = 0; qi < items.size(); ++qi) {
    const auto& item = items[qi];
    const auto m = margin(item);
    out.margins.push_back(m);
    out.loss -= m.value;
    const std::vector<T>* pos_emb = nullptr;
    const std::vector<T>* neg_emb = nullptr;
    for (std::size_t i = 0; i < item.positive_ids.size(); ++i) {
      if (item.positive_ids[i] == m.argmin_positive) pos_emb = item.positive_embs[i];
    }
    for (std::size_t i = 0; i < item.negative_ids.size(); ++i) {
      if (item.negative_ids[i] == m.argmax_negative) neg_emb = item.negative_embs[i];
    }
    const std::size_t d = item.query->size();
    auto& qg = out.query_grads[qi];
    qg.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
      qg[j] = -scale * ((*pos_emb)[j] - (*neg_emb)[j]);
    }
    auto& pos_up = out.image_upstreams[m.argmin_positive];
    if (pos_up.empty()) pos_up.assign(d, T(0));
    auto& neg_up = out.image_upstreams[m.argmax_negative];
    if (neg_up.empty()) neg_up.assign(d, T(0));
    for (std::size_t j = 0; j < d; ++j) {
      pos_up[j] -= scale * (*item.query)[j];
      neg_up[j] += scale * (*item.query)[j];
    }
  }
  return out;
}

// Scales the spans down to the L2 ball of the given radius; no-op inside it.
// Norm accumulates in double regardless of the storage type.
template <typename T>
void project_norm(std::vector<Tensor<T>*> tensors, double radius) {
  if (radius <= 0.0) throw ContractError("projection radius must be positive");
  double sum_sq = 0.0;
  for (const auto* t : tensors) {
    for (const T& v : t->data) {
      const double x = static_cast<double>(v);
      sum_sq += x * x;
    }
  }
  const double norm = std::sqrt(sum_sq);
  if (norm <= radius) return;
  const double scale = radius / norm;
  for (auto* t : tensors) {
    for (T& v : t->data) v = static_cast<T>(static_cast<double>(v) * scale);
  }
}

template <typename T>
double collection_norm(const std::vector<const Tensor<T>*>& tensors) {
  double sum_sq = 0.0;
  for (const auto* t : tensors) {
    for (const T& v : t->data) {
      const double x = static_cast<double>(v);
      sum_sq += x * x;
    }
  }
  return std::sqrt(sum_sq);
}

}  // namespace csm
