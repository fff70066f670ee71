// Retrieval evaluation: DCG_n with gains 2^rel - 1 and log2 rank discounts,
//     DCG_n = gamma * sum_{i=1..n} (2^rel_i - 1) / log2(i + 1),
// where gamma is derived from the self-consistency condition that a full
// list of top-grade results scores exactly 1. Ideal and seeded-random
// rankers bracket the model, and every query is classified by how it matches
// the training query set (exact / partial / none).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "csm/errors.hpp"
#include "csm/index.hpp"
#include "csm/io_util.hpp"
#include "csm/ranking.hpp"
#include "json.hpp"

namespace csm {

// (query id, image id) -> relevance in {0, 2, 3}; per-query candidate pools.
struct JudgmentSet {
  std::map<std::string, std::map<std::string, int>> by_query;

  void add(const std::string& qid, const std::string& iid, int rel) {
    if (rel != 0 && rel != 2 && rel != 3) {
      throw DataError("relevance for (" + qid + "," + iid + ") must be 0, 2, or 3, got " +
                      std::to_string(rel));
    }
    by_query[qid][iid] = rel;
  }

  int relevance(const std::string& qid, const std::string& iid) const {
    auto q = by_query.find(qid);
    if (q == by_query.end()) return 0;
    auto i = q->second.find(iid);
    return i == q->second.end() ? 0 : i->second;  // unjudged pairs are Bad
  }

  std::vector<std::string> pool(const std::string& qid) const {
    auto q = by_query.find(qid);
    if (q == by_query.end()) throw DataError("no judgments for query '" + qid + "'");
    std::vector<std::string> out;
    out.reserve(q->second.size());
    for (const auto& [iid, rel] : q->second) out.push_back(iid);
    return out;
  }
};

inline JudgmentSet read_judgments(const std::string& path) {
  JudgmentSet js;
  for (const auto& line : detail::read_lines(path)) {
    const auto fields = detail::split_tsv_line(line);
    if (fields.size() != 3) throw DataError(path + ": malformed line '" + line + "'");
    int rel = 0;
    try {
      rel = std::stoi(fields[2]);
    } catch (const std::exception&) {
      throw DataError(path + ": bad relevance '" + fields[2] + "'");
    }
    js.add(fields[0], fields[1], rel);
  }
  return js;
}

// gamma = 1 / ((2^max_rel - 1) * sum_{i=1..n} 1/log2(i+1)), so that a list of
// n top-grade results scores exactly 1.
inline double derive_normalizer(int n, int max_rel) {
  if (n < 1) throw ContractError("derive_normalizer requires n >= 1");
  double discount_sum = 0.0;
  for (int i = 1; i <= n; ++i) discount_sum += 1.0 / std::log2(static_cast<double>(i + 1));
  return 1.0 / ((std::exp2(static_cast<double>(max_rel)) - 1.0) * discount_sum);
}

inline double dcg(const RankedList& ranked, const JudgmentSet& judgments, int n, double gamma) {
  if (n < 1) throw ContractError("dcg requires n >= 1");
  double acc = 0.0;
  const int limit = std::min<int>(n, static_cast<int>(ranked.entries.size()));
  for (int i = 1; i <= limit; ++i) {
    const int rel = judgments.relevance(ranked.query_id, ranked.entries[i - 1].first);
    acc += (std::exp2(static_cast<double>(rel)) - 1.0) / std::log2(static_cast<double>(i + 1));
  }
  return gamma * acc;
}

// Candidates sorted by relevance descending, ties by ascending image id.
inline RankedList ideal_ranking(const std::string& qid, const JudgmentSet& judgments) {
  auto q = judgments.by_query.find(qid);
  if (q == judgments.by_query.end()) throw DataError("no judgments for query '" + qid + "'");
  std::vector<std::pair<std::string, double>> scored;
  scored.reserve(q->second.size());
  for (const auto& [iid, rel] : q->second) scored.emplace_back(iid, static_cast<double>(rel));
  auto out = make_ranked_list(qid, std::move(scored), 0);
  out.query_id = qid;
  return out;
}

enum class MatchType { kExact, kPartial, kNone };

inline const char* match_type_name(MatchType m) {
  switch (m) {
    case MatchType::kExact: return "exact";
    case MatchType::kPartial: return "partial";
    case MatchType::kNone: return "none";
  }
  return "?";
}

// exact: the normalized query occurs verbatim in the training query set;
// none: no query word is in the vocabulary; partial: everything else.
inline MatchType match_type(const std::string& query,
                            const std::set<std::string>& normalized_training_queries,
                            const Vocabulary& vocab) {
  const std::string normalized = normalize_query(query);
  if (normalized_training_queries.count(normalized)) return MatchType::kExact;
  for (const auto& w : tokenize(query)) {
    if (vocab.contains(w)) return MatchType::kPartial;
  }
  return MatchType::kNone;
}

inline std::set<std::string> normalize_training_queries(const std::vector<std::string>& queries) {
  std::set<std::string> out;
  for (const auto& q : queries) out.insert(normalize_query(q));
  return out;
}

struct EvalOptions {
  int n = 25;
  std::uint64_t seed = 0;
  std::vector<std::string> training_queries;  // for match-type classification
  int inspect_dimensions = 6;
  int inspect_top_images = 7;
  std::vector<std::string> inspect_words;  // empty -> seeded sample of 3
  int neighbors_k = 5;
};

struct PerQueryResult {
  std::string qid;
  std::string text;
  int word_count = 0;
  MatchType match = MatchType::kPartial;
  bool oov = false;
  double dcg_model = 0.0;
  double dcg_ideal = 0.0;
  double dcg_random = 0.0;
};

struct DimensionInspection {
  int dimension = 0;
  std::vector<std::pair<std::string, double>> top_images;  // by that coordinate of F(I)
};

struct WordInspection {
  std::string word;
  std::vector<std::pair<std::string, double>> top_words;
  std::vector<std::pair<std::string, double>> top_images;
};

struct EvalResults {
  int n = 25;
  double gamma = 0.0;
  std::uint64_t seed = 0;
  double mean_model = 0.0;
  double mean_ideal = 0.0;
  double mean_random = 0.0;
  std::vector<PerQueryResult> per_query;
  std::vector<DimensionInspection> dimensions;
  std::vector<WordInspection> words;
};

// Scores every judged candidate pool with the model (inner product over the
// index rows), against the ideal and seeded-random reference rankers.
// Queries with no in-vocabulary word fall back to the random ranker and are
// flagged oov.
inline EvalResults evaluate(const LoadedCheckpoint& loaded, const ImageIndex& index,
                            const JudgmentSet& judgments,
                            const std::map<std::string, std::string>& query_texts,
                            const EvalOptions& options = {}) {
  detail::check_index_matches(loaded, index);
  const auto& model = loaded.checkpoint.model;
  EvalResults results;
  results.n = options.n;
  results.seed = options.seed;
  results.gamma = derive_normalizer(options.n, 3);

  // Judgments must reference known images only.
  {
    std::string offenders;
    for (const auto& [qid, pool] : judgments.by_query) {
      for (const auto& [iid, rel] : pool) {
        if (index.find(iid) < 0) {
          offenders += (offenders.empty() ? "" : ", ") + qid + ":" + iid;
        }
      }
    }
    if (!offenders.empty()) {
      throw DataError("judgments reference images missing from the index: " + offenders);
    }
  }

  const auto training_set = normalize_training_queries(options.training_queries);
  double sum_model = 0.0, sum_ideal = 0.0, sum_random = 0.0;
  for (const auto& [qid, pool_map] : judgments.by_query) {
    auto text_it = query_texts.find(qid);
    if (text_it == query_texts.end()) {
      throw DataError("no query text for judged query '" + qid + "'");
    }
    const std::string& text = text_it->second;
    PerQueryResult pq;
    pq.qid = qid;
    pq.text = text;
    pq.word_count = static_cast<int>(tokenize(text).size());
    pq.match = match_type(text, training_set, model.vocab);

    std::vector<std::string> pool;
    pool.reserve(pool_map.size());
    for (const auto& [iid, rel] : pool_map) pool.push_back(iid);

    const auto enc = model.encode_query(text);
    RankedList model_ranking;
    if (enc.oov) {
      pq.oov = true;
      model_ranking = random_ranking(qid, pool, mix_seed(options.seed, stream_tag("oov")));
      model_ranking.query_id = qid;
      model_ranking.oov = true;
    } else {
      std::vector<std::pair<std::string, double>> scored;
      scored.reserve(pool.size());
      for (const auto& iid : pool) {
        const int row = index.find(iid);
        scored.emplace_back(iid, detail::dot_f32(index.row(row), enc.vector));
      }
      model_ranking = make_ranked_list(qid, std::move(scored), 0);
    }

    const auto ideal = ideal_ranking(qid, judgments);
    auto random = random_ranking(qid, pool, options.seed);
    random.query_id = qid;

    pq.dcg_model = dcg(model_ranking, judgments, options.n, results.gamma);
    pq.dcg_ideal = dcg(ideal, judgments, options.n, results.gamma);
    pq.dcg_random = dcg(random, judgments, options.n, results.gamma);
    sum_model += pq.dcg_model;
    sum_ideal += pq.dcg_ideal;
    sum_random += pq.dcg_random;
    results.per_query.push_back(std::move(pq));
  }
  const double count = static_cast<double>(results.per_query.size());
  if (count > 0) {
    results.mean_model = sum_model / count;
    results.mean_ideal = sum_ideal / count;
    results.mean_random = sum_random / count;
  }

  // Mapping-space inspection: strongest images per sampled embedding
  // dimension, and nearest words/images of a few vocabulary words.
  const int d = model.dim();
  {
    std::vector<int> dims(d);
    for (int i = 0; i < d; ++i) dims[i] = i;
    auto sampled = sample_without_replacement(
        dims, static_cast<std::size_t>(std::max(0, options.inspect_dimensions)),
        mix_seed(options.seed, stream_tag("dims")));
    std::sort(sampled.begin(), sampled.end());
    for (int dim : sampled) {
      DimensionInspection di;
      di.dimension = dim;
      std::vector<std::pair<std::string, double>> scored;
      scored.reserve(index.ids.size());
      for (std::size_t i = 0; i < index.ids.size(); ++i) {
        scored.emplace_back(index.ids[i], static_cast<double>(index.row(i)[dim]));
      }
      auto ranked = make_ranked_list("", std::move(scored), options.inspect_top_images);
      di.top_images = std::move(ranked.entries);
      results.dimensions.push_back(std::move(di));
    }
  }
  {
    std::vector<std::string> words = options.inspect_words;
    if (words.empty() && model.vocab.size() > 0) {
      words = sample_without_replacement(model.vocab.words(),
                                         std::min<std::size_t>(3, model.vocab.size()),
                                         mix_seed(options.seed, stream_tag("words")));
      std::sort(words.begin(), words.end());
    }
    for (const auto& w : words) {
      const auto nn = neighbors(loaded, index, w, options.neighbors_k);
      results.words.push_back({w, nn.words, nn.images});
    }
  }
  return results;
}

// --- EvalResults JSON ----------------------------------------------------------

inline void to_json(nlohmann::json& j, const EvalResults& r) {
  nlohmann::json per_query = nlohmann::json::array();
  for (const auto& pq : r.per_query) {
    per_query.push_back({{"qid", pq.qid},
                         {"text", pq.text},
                         {"word_count", pq.word_count},
                         {"match_type", match_type_name(pq.match)},
                         {"oov", pq.oov},
                         {"dcg_model", pq.dcg_model},
                         {"dcg_ideal", pq.dcg_ideal},
                         {"dcg_random", pq.dcg_random}});
  }
  nlohmann::json dims = nlohmann::json::array();
  for (const auto& di : r.dimensions) {
    nlohmann::json tops = nlohmann::json::array();
    for (const auto& [iid, v] : di.top_images) tops.push_back({{"iid", iid}, {"response", v}});
    dims.push_back({{"dimension", di.dimension}, {"top_images", tops}});
  }
  nlohmann::json words = nlohmann::json::array();
  for (const auto& wi : r.words) {
    nlohmann::json tw = nlohmann::json::array();
    for (const auto& [w, s] : wi.top_words) tw.push_back({{"word", w}, {"score", s}});
    nlohmann::json ti = nlohmann::json::array();
    for (const auto& [iid, s] : wi.top_images) ti.push_back({{"iid", iid}, {"score", s}});
    words.push_back({{"word", wi.word}, {"top_words", tw}, {"top_images", ti}});
  }
  j = nlohmann::json{{"n", r.n},
                     {"gamma", r.gamma},
                     {"seed", r.seed},
                     {"mean", {{"model", r.mean_model}, {"ideal", r.mean_ideal}, {"random", r.mean_random}}},
                     {"per_query", per_query},
                     {"inspection", {{"dimensions", dims}, {"words", words}}}};
}

inline void from_json(const nlohmann::json& j, EvalResults& r) {
  r.n = j.at("n").get<int>();
  r.gamma = j.at("gamma").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.mean_model = j.at("mean").at("model").get<double>();
  r.mean_ideal = j.at("mean").at("ideal").get<double>();
  r.mean_random = j.at("mean").at("random").get<double>();
  r.per_query.clear();
  for (const auto& pj : j.at("per_query")) {
    PerQueryResult pq;
    pq.qid = pj.at("qid").get<std::string>();
    pq.text = pj.at("text").get<std::string>();
    pq.word_count = pj.at("word_count").get<int>();
    const std::string m = pj.at("match_type").get<std::string>();
    pq.match = m == "exact" ? MatchType::kExact
                            : (m == "none" ? MatchType::kNone : MatchType::kPartial);
    pq.oov = pj.at("oov").get<bool>();
    pq.dcg_model = pj.at("dcg_model").get<double>();
    pq.dcg_ideal = pj.at("dcg_ideal").get<double>();
    pq.dcg_random = pj.at("dcg_random").get<double>();
    r.per_query.push_back(std::move(pq));
  }
  r.dimensions.clear();
  r.words.clear();
  if (j.contains("inspection")) {
    for (const auto& dj : j.at("inspection").at("dimensions")) {
      DimensionInspection di;
      di.dimension = dj.at("dimension").get<int>();
      for (const auto& tj : dj.at("top_images")) {
        di.top_images.emplace_back(tj.at("iid").get<std::string>(),
                                   tj.at("response").get<double>());
      }
      r.dimensions.push_back(std::move(di));
    }
    for (const auto& wj : j.at("inspection").at("words")) {
      WordInspection wi;
      wi.word = wj.at("word").get<std::string>();
      for (const auto& tj : wj.at("top_words")) {
        wi.top_words.emplace_back(tj.at("word").get<std::string>(), tj.at("score").get<double>());
      }
      for (const auto& tj : wj.at("top_images")) {
        wi.top_images.emplace_back(tj.at("iid").get<std::string>(), tj.at("score").get<double>());
      }
      r.words.push_back(std::move(wi));
    }
  }
}

}  // namespace csm
