// Dataset directory format:
//   manifest.json   seed, generation config, config digest, counts
//   queries.tsv     qid <TAB> utf8 text
//   clicks.tsv      qid <TAB> iid
//   judgments.tsv   qid <TAB> iid <TAB> rel   (rel in {0,2,3})
//   images/<iid>.ten  "CSMT", u32 version=1, u32 ndim, dims, f32 row-major
// Ids are zero-padded decimal strings so lexicographic order matches numeric
// order.
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "csm/errors.hpp"
#include "csm/io_util.hpp"
#include "csm/synthgen.hpp"
#include "csm/tensor.hpp"
#include "csm/trainer.hpp"
#include "json.hpp"

namespace csm {

inline constexpr int kIdWidth = 6;

inline std::string format_id(int index) {
  std::string s = std::to_string(index);
  if (static_cast<int>(s.size()) < kIdWidth) {
    s.insert(s.begin(), kIdWidth - s.size(), '0');
  }
  return s;
}

// --- tensor files -------------------------------------------------------------

inline std::vector<unsigned char> serialize_tensor(const Tensor<float>& t) {
  ByteWriter w;
  w.put_string("CSMT");
  w.put_u32(1);
  w.put_u32(static_cast<std::uint32_t>(t.shape.size()));
  for (int d : t.shape) w.put_u32(static_cast<std::uint32_t>(d));
  w.put_f32_array(t.data.data(), t.data.size());
  return w.bytes();
}

inline Tensor<float> parse_tensor(const std::vector<unsigned char>& bytes) {
  ByteReader r(bytes);
  if (r.get_string(4, "magic") != "CSMT") throw ParseError("bad tensor file magic", 0);
  const auto version = r.get_u32("version");
  if (version != 1) throw ParseError("unsupported tensor file version " + std::to_string(version), 4);
  const auto ndim = r.get_u32("ndim");
  if (ndim == 0 || ndim > 8) throw ParseError("implausible tensor rank " + std::to_string(ndim), 8);
  std::vector<int> shape(ndim);
  for (auto& d : shape) d = static_cast<int>(r.get_u32("dims"));
  Tensor<float> t(shape);
  r.get_f32_array(t.data.data(), t.data.size(), "tensor data");
  if (r.remaining() != 0) throw ParseError("unexpected trailing data", r.offset());
  return t;
}

inline void write_tensor_file(const std::string& path, const Tensor<float>& t) {
  write_file_bytes(path, serialize_tensor(t));
}

inline Tensor<float> read_tensor_file(const std::string& path) {
  try {
    return parse_tensor(read_file_bytes(path));
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what(), e.offset());
  }
}

// --- dataset directories ------------------------------------------------------

inline void write_dataset(const std::string& dir, const SyntheticDataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");

  nlohmann::json manifest{{"format_version", 1},
                          {"seed", ds.seed},
                          {"config", ds.config},
                          {"config_digest", ds.config_digest},
                          {"num_images", static_cast<int>(ds.images.size())},
                          {"num_queries", static_cast<int>(ds.query_texts.size())},
                          {"id_width", kIdWidth}};
  write_text_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");

  std::string queries;
  for (std::size_t q = 0; q < ds.query_texts.size(); ++q) {
    queries += format_id(static_cast<int>(q)) + "\t" + ds.query_texts[q] + "\n";
  }
  write_text_file((fs::path(dir) / "queries.tsv").string(), queries);

  // Clicks sorted by (qid, iid).
  std::vector<std::pair<int, int>> sorted;
  sorted.reserve(ds.clicks.size());
  for (const auto& [i, q] : ds.clicks) sorted.emplace_back(q, i);
  std::sort(sorted.begin(), sorted.end());
  std::string clicks;
  for (const auto& [q, i] : sorted) {
    clicks += format_id(q) + "\t" + format_id(i) + "\n";
  }
  write_text_file((fs::path(dir) / "clicks.tsv").string(), clicks);

  std::string judgments;
  for (std::size_t q = 0; q < ds.query_texts.size(); ++q) {
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
      judgments += format_id(static_cast<int>(q)) + "\t" + format_id(static_cast<int>(i)) +
                   "\t" + std::to_string(ds.relevance(static_cast<int>(q), static_cast<int>(i))) +
                   "\n";
    }
  }
  write_text_file((fs::path(dir) / "judgments.tsv").string(), judgments);

  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    write_tensor_file(
        (fs::path(dir) / "images" / (format_id(static_cast<int>(i)) + ".ten")).string(),
        ds.images[i]);
  }
}

struct LoadedDataset {
  nlohmann::json manifest;
  std::vector<std::string> image_ids;   // lexicographic order
  std::vector<Tensor<float>> images;    // aligned with image_ids
  std::vector<std::string> query_ids;   // lexicographic order
  std::vector<std::string> query_texts; // aligned with query_ids
  std::vector<std::pair<int, int>> clicks;  // dense (image, query) indices

  int image_index(const std::string& iid) const {
    auto it = std::lower_bound(image_ids.begin(), image_ids.end(), iid);
    if (it == image_ids.end() || *it != iid) return -1;
    return static_cast<int>(it - image_ids.begin());
  }
  int query_index(const std::string& qid) const {
    auto it = std::lower_bound(query_ids.begin(), query_ids.end(), qid);
    if (it == query_ids.end() || *it != qid) return -1;
    return static_cast<int>(it - query_ids.begin());
  }

  TrainData train_view() const { return TrainData{images, query_texts, clicks}; }
};

namespace detail {
inline std::vector<std::string> split_tsv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    const auto tab = line.find('\t', start);
    if (tab == std::string::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

inline std::vector<std::string> read_lines(const std::string& path) {
  const std::string text = read_text_file(path);
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(std::move(line));
    start = end + 1;
  }
  return lines;
}
}  // namespace detail

inline LoadedDataset read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  LoadedDataset ds;
  try {
    ds.manifest = nlohmann::json::parse(read_text_file((fs::path(dir) / "manifest.json").string()));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(dir + "/manifest.json: " + e.what());
  }

  for (const auto& line : detail::read_lines((fs::path(dir) / "queries.tsv").string())) {
    const auto fields = detail::split_tsv_line(line);
    if (fields.size() != 2) throw DataError(dir + "/queries.tsv: malformed line '" + line + "'");
    ds.query_ids.push_back(fields[0]);
    ds.query_texts.push_back(fields[1]);
  }
  if (!std::is_sorted(ds.query_ids.begin(), ds.query_ids.end())) {
    std::vector<std::size_t> perm(ds.query_ids.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::sort(perm.begin(), perm.end(),
              [&](std::size_t a, std::size_t b) { return ds.query_ids[a] < ds.query_ids[b]; });
    std::vector<std::string> ids, texts;
    for (auto i : perm) {
      ids.push_back(ds.query_ids[i]);
      texts.push_back(ds.query_texts[i]);
    }
    ds.query_ids = std::move(ids);
    ds.query_texts = std::move(texts);
  }

  const fs::path image_dir = fs::path(dir) / "images";
  if (!fs::is_directory(image_dir)) throw DataError("missing images directory: " + image_dir.string());
  for (const auto& entry : fs::directory_iterator(image_dir)) {
    if (entry.path().extension() == ".ten") {
      ds.image_ids.push_back(entry.path().stem().string());
    }
  }
  std::sort(ds.image_ids.begin(), ds.image_ids.end());
  ds.images.reserve(ds.image_ids.size());
  for (const auto& iid : ds.image_ids) {
    ds.images.push_back(read_tensor_file((image_dir / (iid + ".ten")).string()));
  }

  for (const auto& line : detail::read_lines((fs::path(dir) / "clicks.tsv").string())) {
    const auto fields = detail::split_tsv_line(line);
    if (fields.size() != 2) throw DataError(dir + "/clicks.tsv: malformed line '" + line + "'");
    const int q = ds.query_index(fields[0]);
    const int i = ds.image_index(fields[1]);
    if (q < 0) throw DataError(dir + "/clicks.tsv: unknown query id '" + fields[0] + "'");
    if (i < 0) throw DataError(dir + "/clicks.tsv: unknown image id '" + fields[1] + "'");
    ds.clicks.emplace_back(i, q);
  }
  return ds;
}

}  // namespace csm
