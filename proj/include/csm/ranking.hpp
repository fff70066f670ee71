// Ranked retrieval results and the seeded random reference ranking.
#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "csm/errors.hpp"
#include "csm/random.hpp"

namespace csm {

// Scores are non-increasing; equal scores are ordered by ascending image id.
struct RankedList {
  std::string query_id;
  std::vector<std::pair<std::string, double>> entries;  // (image id, score)
  bool oov = false;

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    out.reserve(entries.size());
    for (const auto& [id, s] : entries) out.push_back(id);
    return out;
  }
};

// Sorts (score desc, id asc) and truncates to k (k <= 0 keeps everything).
inline RankedList make_ranked_list(std::string query_id,
                                   std::vector<std::pair<std::string, double>> scored, int k) {
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (k > 0 && static_cast<int>(scored.size()) > k) scored.resize(k);
  return RankedList{std::move(query_id), std::move(scored), false};
}

// Uniform seeded permutation, deterministic per (query_id, seed). Synthetic
// strictly-decreasing scores keep the RankedList ordering invariant intact.
inline RankedList random_ranking(const std::string& query_id,
                                 const std::vector<std::string>& candidates, std::uint64_t seed) {
  if (candidates.empty()) throw ContractError("random_ranking requires candidates");
  std::vector<std::string> order = candidates;
  Rng rng(mix_seed(seed, stream_tag(query_id)));
  rng.shuffle(order);
  RankedList out;
  out.query_id = query_id;
  out.entries.reserve(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.entries.emplace_back(std::move(order[i]), -static_cast<double>(i));
  }
  return out;
}

}  // namespace csm
