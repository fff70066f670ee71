// Sparse click matrix, first/second-order image relationship matrices, and
// relevance-aware negative sampling. The second-order matrix is used to drop
// potentially relevant images from a query's negative pool: an image is kept
// only if it has no two-step co-click path to any clicked image of the query.
#pragma once

#include <algorithm>
#include <cstdint>
#include <utility>
#include <vector>

#include "csm/errors.hpp"
#include "csm/random.hpp"

namespace csm {

// Binary image x query click relation. Rows and the transposed per-query view
// are kept sorted and mutually consistent; duplicate pairs are collapsed.
class ClickMatrix {
 public:
  ClickMatrix() = default;
  ClickMatrix(int num_images, int num_queries,
              const std::vector<std::pair<int, int>>& image_query_pairs)
      : num_images_(num_images),
        num_queries_(num_queries),
        rows_(num_images),
        cols_(num_queries) {
    for (const auto& [i, q] : image_query_pairs) {
      if (i < 0 || i >= num_images_ || q < 0 || q >= num_queries_) {
        throw ContractError("click pair (" + std::to_string(i) + "," + std::to_string(q) +
                            ") out of bounds");
      }
      rows_[i].push_back(q);
      cols_[q].push_back(i);
    }
    for (auto& r : rows_) dedup(r);
    for (auto& c : cols_) dedup(c);
  }

  int num_images() const { return num_images_; }
  int num_queries() const { return num_queries_; }

  // Sorted query indices clicked for image i.
  const std::vector<int>& queries_of(int i) const { return rows_[i]; }
  // Sorted image indices clicked for query q.
  const std::vector<int>& images_of(int q) const { return cols_[q]; }

  bool clicked(int i, int q) const {
    const auto& r = rows_[i];
    return std::binary_search(r.begin(), r.end(), q);
  }

  std::size_t click_count() const {
    std::size_t n = 0;
    for (const auto& r : rows_) n += r.size();
    return n;
  }

  // Ascending image indices with no click on query q.
  std::vector<int> unclicked_images(int q) const {
    const auto& pos = cols_[q];
    std::vector<int> out;
    out.reserve(num_images_ - pos.size());
    std::size_t p = 0;
    for (int i = 0; i < num_images_; ++i) {
      if (p < pos.size() && pos[p] == i) {
        ++p;
      } else {
        out.push_back(i);
      }
    }
    return out;
  }

 private:
  static void dedup(std::vector<int>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }

  int num_images_ = 0;
  int num_queries_ = 0;
  std::vector<std::vector<int>> rows_;
  std::vector<std::vector<int>> cols_;
};

// Symmetric sparse integer matrix over images; adjacency sorted by column.
class RelationMatrix {
 public:
  RelationMatrix() = default;
  explicit RelationMatrix(int n) : n_(n), adj_(n) {}

  int size() const { return n_; }

  const std::vector<std::pair<int, std::int64_t>>& row(int i) const { return adj_[i]; }

  std::int64_t get(int i, int j) const {
    const auto& r = adj_[i];
    auto it = std::lower_bound(r.begin(), r.end(), j,
                               [](const auto& e, int col) { return e.first < col; });
    return (it != r.end() && it->first == j) ? it->second : 0;
  }

  void set_row(int i, std::vector<std::pair<int, std::int64_t>> entries) {
    adj_[i] = std::move(entries);
  }

 private:
  int n_ = 0;
  std::vector<std::vector<std::pair<int, std::int64_t>>> adj_;
};

// M1 = M * M^T: entry (i,j) counts queries clicked by both images.
inline RelationMatrix first_order_matrix(const ClickMatrix& m) {
  const int n = m.num_images();
  RelationMatrix out(n);
  std::vector<std::int64_t> acc(n, 0);
  std::vector<int> touched;
  for (int i = 0; i < n; ++i) {
    touched.clear();
    for (int q : m.queries_of(i)) {
      for (int j : m.images_of(q)) {
        if (acc[j] == 0) touched.push_back(j);
        ++acc[j];
      }
    }
    std::sort(touched.begin(), touched.end());
    std::vector<std::pair<int, std::int64_t>> row;
    row.reserve(touched.size());
    for (int j : touched) {
      row.emplace_back(j, acc[j]);
      acc[j] = 0;
    }
    out.set_row(i, std::move(row));
  }
  return out;
}

// M2 = M1 * M1: entry (i,j) counts weighted two-step co-click paths.
inline RelationMatrix second_order_matrix(const RelationMatrix& m1) {
  const int n = m1.size();
  RelationMatrix out(n);
  std::vector<std::int64_t> acc(n, 0);
  std::vector<int> touched;
  for (int i = 0; i < n; ++i) {
    touched.clear();
    for (const auto& [k, v] : m1.row(i)) {
      for (const auto& [j, w] : m1.row(k)) {
        if (acc[j] == 0) touched.push_back(j);
        acc[j] += v * w;
      }
    }
    std::sort(touched.begin(), touched.end());
    std::vector<std::pair<int, std::int64_t>> row;
    row.reserve(touched.size());
    for (int j : touched) {
      row.emplace_back(j, acc[j]);
      acc[j] = 0;
    }
    out.set_row(i, std::move(row));
  }
  return out;
}

// {I : M(I,Q)=0 and M2(I+,I)=0 for every clicked I+}. Ascending order.
// The quantifier is for-all: one related positive is enough to exclude.
inline std::vector<int> eligible_negatives(const ClickMatrix& m, const RelationMatrix& m2,
                                           int query) {
  if (query < 0 || query >= m.num_queries()) {
    throw ContractError("query index " + std::to_string(query) + " out of bounds");
  }
  const auto& positives = m.images_of(query);
  if (positives.empty()) {
    throw DataError("query " + std::to_string(query) + " has no clicks and cannot be trained");
  }
  std::vector<char> excluded(m.num_images(), 0);
  for (int p : positives) {
    excluded[p] = 1;
    for (const auto& [j, v] : m2.row(p)) {
      if (v != 0) excluded[j] = 1;
    }
  }
  std::vector<int> out;
  for (int i = 0; i < m.num_images(); ++i) {
    if (!excluded[i]) out.push_back(i);
  }
  return out;
}

struct NegativeSample {
  std::vector<int> images;
  bool fallback_used = false;  // filter waived because the eligible set was empty
};

// Uniform sample of min(k, |eligible|) without replacement. When the filtered
// pool is empty the sampler falls back to the plain unclicked pool and flags it.
inline NegativeSample sample_negatives(const std::vector<int>& eligible,
                                       const std::vector<int>& unclicked_fallback, int k,
                                       std::uint64_t seed) {
  if (k < 1) throw ContractError("negative sample size must be >= 1");
  NegativeSample out;
  if (!eligible.empty()) {
    out.images = sample_without_replacement(eligible, static_cast<std::size_t>(k), seed);
  } else {
    out.images =
        sample_without_replacement(unclicked_fallback, static_cast<std::size_t>(k), seed);
    out.fallback_used = true;
  }
  return out;
}

}  // namespace csm
