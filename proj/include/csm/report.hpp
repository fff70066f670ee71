// Analysis over evaluation results: mean DCG bucketed by query length,
// match-type distribution per length bucket, and the mapping-space
// inspection carried through from evaluation. Serialized as JSON plus plain
// text SVG bar charts.
#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "csm/evaluator.hpp"
#include "csm/io_util.hpp"
#include "json.hpp"

namespace csm {

struct LengthBucket {
  std::string label;  // "1", "2", "3", "4+"
  int count = 0;
  double mean_model = 0.0;
  double mean_ideal = 0.0;
  double mean_random = 0.0;
  int exact = 0;
  int partial = 0;
  int none = 0;
};

inline std::vector<LengthBucket> bucket_by_length(const EvalResults& results) {
  std::vector<LengthBucket> buckets(4);
  buckets[0].label = "1";
  buckets[1].label = "2";
  buckets[2].label = "3";
  buckets[3].label = "4+";
  for (const auto& pq : results.per_query) {
    const int b = std::min(std::max(pq.word_count, 1), 4) - 1;
    auto& bucket = buckets[b];
    ++bucket.count;
    bucket.mean_model += pq.dcg_model;
    bucket.mean_ideal += pq.dcg_ideal;
    bucket.mean_random += pq.dcg_random;
    switch (pq.match) {
      case MatchType::kExact: ++bucket.exact; break;
      case MatchType::kPartial: ++bucket.partial; break;
      case MatchType::kNone: ++bucket.none; break;
    }
  }
  for (auto& b : buckets) {
    if (b.count > 0) {
      b.mean_model /= b.count;
      b.mean_ideal /= b.count;
      b.mean_random /= b.count;
    }
  }
  return buckets;
}

namespace detail {

struct BarSeries {
  std::string name;
  std::string color;
  std::vector<double> values;
};

// Minimal grouped bar chart; pure text SVG, no dependencies.
inline std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& groups,
                                 const std::vector<BarSeries>& series) {
  const int width = 640, height = 360;
  const int left = 56, right = 16, top = 40, bottom = 48;
  const double plot_w = width - left - right;
  const double plot_h = height - top - bottom;
  double max_v = 0.0;
  for (const auto& s : series) {
    for (double v : s.values) max_v = std::max(max_v, v);
  }
  if (max_v <= 0.0) max_v = 1.0;

  std::string svg;
  auto line = [&svg](const std::string& s) { svg += s + "\n"; };
  char buf[256];
  line("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
       "\" height=\"" + std::to_string(height) + "\">");
  line("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
  line("<text x=\"" + std::to_string(width / 2) +
       "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">" + title +
       "</text>");
  // Axes and horizontal grid lines.
  for (int g = 0; g <= 4; ++g) {
    const double y = top + plot_h - plot_h * g / 4.0;
    const double v = max_v * g / 4.0;
    std::snprintf(buf, sizeof(buf),
                  "<line x1=\"%d\" y1=\"%.1f\" x2=\"%d\" y2=\"%.1f\" stroke=\"#ddd\"/>", left, y,
                  width - right, y);
    line(buf);
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%.1f\" text-anchor=\"end\" font-family=\"sans-serif\" "
                  "font-size=\"11\">%.3g</text>",
                  left - 6, y + 4, v);
    line(buf);
  }
  const std::size_t ng = groups.size(), ns = series.size();
  const double group_w = plot_w / std::max<std::size_t>(ng, 1);
  const double bar_w = group_w * 0.8 / std::max<std::size_t>(ns, 1);
  for (std::size_t gi = 0; gi < ng; ++gi) {
    for (std::size_t si = 0; si < ns; ++si) {
      const double v = gi < series[si].values.size() ? series[si].values[gi] : 0.0;
      const double h = plot_h * v / max_v;
      const double x = left + group_w * gi + group_w * 0.1 + bar_w * si;
      std::snprintf(buf, sizeof(buf),
                    "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"%s\"/>", x,
                    top + plot_h - h, bar_w, h, series[si].color.c_str());
      line(buf);
    }
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.1f\" y=\"%d\" text-anchor=\"middle\" font-family=\"sans-serif\" "
                  "font-size=\"12\">%s</text>",
                  left + group_w * gi + group_w / 2.0, height - bottom + 18,
                  groups[gi].c_str());
    line(buf);
  }
  // Legend.
  double lx = static_cast<double>(left);
  for (const auto& s : series) {
    std::snprintf(buf, sizeof(buf),
                  "<rect x=\"%.1f\" y=\"%d\" width=\"10\" height=\"10\" fill=\"%s\"/>", lx,
                  height - 16, s.color.c_str());
    line(buf);
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.1f\" y=\"%d\" font-family=\"sans-serif\" font-size=\"11\">%s</text>",
                  lx + 14, height - 7, s.name.c_str());
    line(buf);
    lx += 14 + 8.0 * s.name.size() + 18;
  }
  line("</svg>");
  return svg;
}

}  // namespace detail

// Writes analysis.json, dcg_by_length.svg, and match_types.svg under out_dir.
inline nlohmann::json analysis_report(const EvalResults& results, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const auto buckets = bucket_by_length(results);

  nlohmann::json by_length = nlohmann::json::array();
  for (const auto& b : buckets) {
    by_length.push_back({{"bucket", b.label},
                         {"count", b.count},
                         {"mean_model", b.mean_model},
                         {"mean_ideal", b.mean_ideal},
                         {"mean_random", b.mean_random},
                         {"exact", b.exact},
                         {"partial", b.partial},
                         {"none", b.none}});
  }
  nlohmann::json dims = nlohmann::json::array();
  for (const auto& di : results.dimensions) {
    nlohmann::json tops = nlohmann::json::array();
    for (const auto& [iid, v] : di.top_images) tops.push_back({{"iid", iid}, {"response", v}});
    dims.push_back({{"dimension", di.dimension}, {"top_images", tops}});
  }
  nlohmann::json words = nlohmann::json::array();
  for (const auto& wi : results.words) {
    nlohmann::json tw = nlohmann::json::array();
    for (const auto& [w, s] : wi.top_words) tw.push_back({{"word", w}, {"score", s}});
    nlohmann::json ti = nlohmann::json::array();
    for (const auto& [iid, s] : wi.top_images) ti.push_back({{"iid", iid}, {"score", s}});
    words.push_back({{"word", wi.word}, {"top_words", tw}, {"top_images", ti}});
  }
  nlohmann::json analysis{
      {"mean", {{"model", results.mean_model}, {"ideal", results.mean_ideal}, {"random", results.mean_random}}},
      {"queries", static_cast<int>(results.per_query.size())},
      {"dcg_by_length", by_length},
      {"inspection", {{"dimensions", dims}, {"words", words}}}};
  write_text_file((fs::path(out_dir) / "analysis.json").string(), analysis.dump(2) + "\n");

  std::vector<std::string> labels;
  for (const auto& b : buckets) labels.push_back(b.label + " (" + std::to_string(b.count) + ")");
  std::vector<detail::BarSeries> dcg_series(3);
  dcg_series[0] = {"model", "#4878cf", {}};
  dcg_series[1] = {"ideal", "#6acc65", {}};
  dcg_series[2] = {"random", "#d65f5f", {}};
  for (const auto& b : buckets) {
    dcg_series[0].values.push_back(b.mean_model);
    dcg_series[1].values.push_back(b.mean_ideal);
    dcg_series[2].values.push_back(b.mean_random);
  }
  write_text_file((fs::path(out_dir) / "dcg_by_length.svg").string(),
                  detail::svg_bar_chart("Mean DCG by query length", labels, dcg_series));

  std::vector<detail::BarSeries> match_series(3);
  match_series[0] = {"exact", "#4878cf", {}};
  match_series[1] = {"partial", "#ee854a", {}};
  match_series[2] = {"none", "#797979", {}};
  for (const auto& b : buckets) {
    match_series[0].values.push_back(b.exact);
    match_series[1].values.push_back(b.partial);
    match_series[2].values.push_back(b.none);
  }
  write_text_file((fs::path(out_dir) / "match_types.svg").string(),
                  detail::svg_bar_chart("Match types by query length", labels, match_series));
  return analysis;
}

}  // namespace csm
