// Query tower: vocabulary over the training queries, idf statistics, and the
// normalized-idf weighted combination of word vectors
//     W(Q) = (1/|Q|) * sum_t omega(t) * w(t),
//     omega(t) = idf_t / sqrt(sum_t idf_t^2),   idf_t = -log(r_t)
// where |Q| counts the in-vocabulary word occurrences of Q. Out-of-vocabulary
// words are dropped; an all-OOV query encodes to the zero vector.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "csm/errors.hpp"
#include "csm/io_util.hpp"
#include "csm/tensor.hpp"

namespace csm {

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
      index_[words_[i]] = static_cast<int>(i);
    }
  }

  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }
  const std::string& word(int index) const { return words_[index]; }

  // -1 when absent.
  int lookup(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? -1 : it->second;
  }
  bool contains(const std::string& w) const { return index_.count(w) != 0; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

// Top-K words by the number of queries containing them (presence counted once
// per query), ties broken lexicographically ascending. Index order follows
// the ranking.
inline Vocabulary build_vocabulary(const std::vector<std::string>& queries, int k) {
  if (queries.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
  if (k < 1) throw ContractError("vocabulary size must be >= 1");
  std::map<std::string, std::int64_t> counts;
  std::vector<std::string> seen;
  for (const auto& q : queries) {
    auto tokens = tokenize(q);
    std::sort(tokens.begin(), tokens.end());
    tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
    for (const auto& t : tokens) ++counts[t];
  }
  std::vector<std::pair<std::string, std::int64_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (static_cast<int>(ranked.size()) > k) ranked.resize(k);
  std::vector<std::string> words;
  words.reserve(ranked.size());
  for (auto& [w, c] : ranked) words.push_back(std::move(w));
  return Vocabulary(std::move(words));
}

struct IdfTable {
  std::vector<double> idf;  // aligned with vocabulary indices

  double at(int index) const { return idf[index]; }
};

// idf_t = -ln(r_t), r_t = fraction of queries containing t.
inline IdfTable compute_idf(const std::vector<std::string>& queries, const Vocabulary& vocab) {
  std::vector<std::int64_t> doc_freq(vocab.size(), 0);
  for (const auto& q : queries) {
    auto tokens = tokenize(q);
    std::sort(tokens.begin(), tokens.end());
    tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
    for (const auto& t : tokens) {
      int idx = vocab.lookup(t);
      if (idx >= 0) ++doc_freq[idx];
    }
  }
  IdfTable table;
  table.idf.resize(vocab.size(), 0.0);
  const double total = static_cast<double>(queries.size());
  for (int i = 0; i < vocab.size(); ++i) {
    if (doc_freq[i] > 0) {
      const double r = static_cast<double>(doc_freq[i]) / total;
      table.idf[i] = -std::log(r);
    }
    // A vocabulary word absent from the corpus would have r=0; the table is
    // only defined for vocabularies built from the same corpus, where this
    // cannot happen, so absent words keep idf 0.
  }
  return table;
}

// Normalized idf weights over the in-vocabulary word occurrences of a query.
// When every idf is zero the weights fall back to uniform 1/sqrt(count).
inline std::vector<std::pair<int, double>> query_weights(const std::vector<std::string>& words,
                                                         const IdfTable& idf,
                                                         const Vocabulary& vocab) {
  std::vector<std::pair<int, double>> in_vocab;
  double sum_sq = 0.0;
  for (const auto& w : words) {
    const int idx = vocab.lookup(w);
    if (idx < 0) continue;
    const double v = idf.at(idx);
    in_vocab.emplace_back(idx, v);
    sum_sq += v * v;
  }
  if (in_vocab.empty()) return {};
  const double denom = std::sqrt(sum_sq);
  if (denom < 1e-12) {
    const double uniform = 1.0 / std::sqrt(static_cast<double>(in_vocab.size()));
    for (auto& [idx, w] : in_vocab) w = uniform;
  } else {
    for (auto& [idx, w] : in_vocab) w /= denom;
  }
  return in_vocab;
}

template <typename T>
struct QueryEncoding {
  std::vector<T> vector;                         // W(Q), dimension d
  std::vector<std::pair<int, double>> in_vocab;  // (row index, omega(t)/|Q|)
  bool oov = false;                              // true iff no word is in vocabulary
};

template <typename T>
QueryEncoding<T> embed_query(const std::vector<std::string>& words, const Tensor<T>& table,
                             const IdfTable& idf, const Vocabulary& vocab) {
  if (table.shape.size() != 2 || table.shape[0] != vocab.size()) {
    throw ContractError("embedding table shape " + shape_string(table.shape) +
                        " does not match vocabulary size " + std::to_string(vocab.size()));
  }
  const int d = table.shape[1];
  QueryEncoding<T> out;
  out.vector.assign(d, T(0));
  auto weights = query_weights(words, idf, vocab);
  if (weights.empty()) {
    out.oov = true;
    return out;
  }
  const double inv_len = 1.0 / static_cast<double>(weights.size());
  out.in_vocab.reserve(weights.size());
  for (const auto& [idx, omega] : weights) {
    const double coef = omega * inv_len;
    out.in_vocab.emplace_back(idx, coef);
    const T* row = table.data.data() + static_cast<std::size_t>(idx) * d;
    const T c = static_cast<T>(coef);
    for (int j = 0; j < d; ++j) out.vector[j] += c * row[j];
  }
  return out;
}

template <typename T>
QueryEncoding<T> embed_query_text(const std::string& text, const Tensor<T>& table,
                                  const IdfTable& idf, const Vocabulary& vocab) {
  return embed_query(tokenize(text), table, idf, vocab);
}

// Sparse gradient on embedding rows: row t receives (omega(t)/|Q|) * upstream.
template <typename T>
std::vector<std::pair<int, std::vector<T>>> embed_query_backward(
    const QueryEncoding<T>& encoding, const std::vector<T>& upstream) {
  std::vector<std::pair<int, std::vector<T>>> grads;
  grads.reserve(encoding.in_vocab.size());
  for (const auto& [idx, coef] : encoding.in_vocab) {
    std::vector<T> g(upstream.size());
    const T c = static_cast<T>(coef);
    for (std::size_t j = 0; j < upstream.size(); ++j) g[j] = c * upstream[j];
    grads.emplace_back(idx, std::move(g));
  }
  return grads;
}

}  // namespace csm
