// Image index: every candidate image embedded once, scanned exhaustively at
// query time. Index files ("CSMI") record the checkpoint digest they were
// built from; search rejects a mismatched model/index pair.
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "csm/checkpoint.hpp"
#include "csm/dataset_io.hpp"
#include "csm/errors.hpp"
#include "csm/io_util.hpp"
#include "csm/ranking.hpp"
#include "json.hpp"

namespace csm {

struct ImageIndex {
  std::vector<std::string> ids;  // directory-lexicographic order
  int dim = 0;
  std::vector<float> rows;       // ids.size() x dim
  std::string checkpoint_digest;

  const float* row(std::size_t i) const { return rows.data() + i * dim; }

  int find(const std::string& iid) const {
    auto it = std::lower_bound(ids.begin(), ids.end(), iid);
    if (it == ids.end() || *it != iid) return -1;
    return static_cast<int>(it - ids.begin());
  }
};

// Embeds every *.ten image under the directory, in lexicographic filename
// order. All unreadable or mis-shaped files are reported together.
inline ImageIndex build_index(const LoadedCheckpoint& loaded, const std::string& image_dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(image_dir)) throw DataError("not a directory: " + image_dir);
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(image_dir)) {
    if (entry.path().extension() == ".ten") files.push_back(entry.path().string());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no .ten images under " + image_dir);

  const auto& model = loaded.checkpoint.model;
  ImageIndex index;
  index.dim = model.dim();
  index.checkpoint_digest = loaded.digest;
  std::string errors;
  for (const auto& file : files) {
    try {
      Tensor<float> img = read_tensor_file(file);
      if (img.shape != model.input_shape) {
        throw DataError(file + ": image shape " + shape_string(img.shape) +
                        " does not match network input " + shape_string(model.input_shape));
      }
      const auto emb = model.encode_image(img);
      index.ids.push_back(fs::path(file).stem().string());
      index.rows.insert(index.rows.end(), emb.begin(), emb.end());
    } catch (const std::exception& e) {
      errors += std::string(errors.empty() ? "" : "\n") + e.what();
    }
  }
  if (!errors.empty()) throw DataError("index build failed:\n" + errors);
  return index;
}

inline std::vector<unsigned char> serialize_index(const ImageIndex& index) {
  nlohmann::json header{{"version", 1},
                        {"dim", index.dim},
                        {"checkpoint_digest", index.checkpoint_digest},
                        {"ids", index.ids}};
  const std::string header_bytes = header.dump();
  ByteWriter w;
  w.put_string("CSMI");
  w.put_u32(1);
  w.put_u32(static_cast<std::uint32_t>(header_bytes.size()));
  w.put_string(header_bytes);
  w.put_f32_array(index.rows.data(), index.rows.size());
  return w.bytes();
}

inline ImageIndex parse_index(const std::vector<unsigned char>& bytes) {
  ByteReader r(bytes);
  if (r.get_string(4, "magic") != "CSMI") throw ParseError("bad index magic", 0);
  const auto version = r.get_u32("version");
  if (version != 1) throw ParseError("unsupported index version " + std::to_string(version), 4);
  const auto header_len = r.get_u32("header length");
  const std::size_t header_at = r.offset();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.get_string(header_len, "header"));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed index header: ") + e.what(), header_at);
  }
  ImageIndex index;
  try {
    index.dim = header.at("dim").get<int>();
    index.checkpoint_digest = header.at("checkpoint_digest").get<std::string>();
    index.ids = header.at("ids").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("index header fields: ") + e.what(), header_at);
  }
  if (index.dim < 1) throw DataError("index dimension must be positive");
  index.rows.resize(index.ids.size() * static_cast<std::size_t>(index.dim));
  r.get_f32_array(index.rows.data(), index.rows.size(), "embedding rows");
  if (r.remaining() != 0) throw ParseError("unexpected trailing data", r.offset());
  return index;
}

inline void save_index(const std::string& path, const ImageIndex& index) {
  write_file_bytes(path, serialize_index(index));
}

inline ImageIndex load_index(const std::string& path) {
  try {
    return parse_index(read_file_bytes(path));
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what(), e.offset());
  }
}

namespace detail {
inline void check_index_matches(const LoadedCheckpoint& loaded, const ImageIndex& index) {
  if (index.checkpoint_digest != loaded.digest) {
    throw DataError("index was built from checkpoint " + index.checkpoint_digest +
                    " but the loaded checkpoint digest is " + loaded.digest);
  }
}

inline double dot_f32(const float* a, const std::vector<float>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}
}  // namespace detail

// Top-k by inner product over the whole index; ties broken by ascending
// image id. An all-OOV query returns the head of a seeded random permutation
// with the oov flag set.
inline RankedList search(const LoadedCheckpoint& loaded, const ImageIndex& index,
                         const std::string& query_text, int k, std::uint64_t seed) {
  if (k < 1) throw ContractError("k must be >= 1");
  if (index.ids.empty()) throw DataError("cannot search an empty index");
  detail::check_index_matches(loaded, index);
  const auto& model = loaded.checkpoint.model;
  const auto enc = model.encode_query(query_text);
  if (enc.oov) {
    RankedList out = random_ranking("", index.ids, seed);
    if (k < static_cast<int>(out.entries.size())) out.entries.resize(k);
    out.oov = true;
    return out;
  }
  std::vector<std::pair<std::string, double>> scored;
  scored.reserve(index.ids.size());
  for (std::size_t i = 0; i < index.ids.size(); ++i) {
    scored.emplace_back(index.ids[i], detail::dot_f32(index.row(i), enc.vector));
  }
  return make_ranked_list("", std::move(scored), k);
}

struct NeighborResult {
  std::vector<std::pair<std::string, double>> words;
  std::vector<std::pair<std::string, double>> images;
};

// Nearest vocabulary words and indexed images of a word under inner product.
inline NeighborResult neighbors(const LoadedCheckpoint& loaded, const ImageIndex& index,
                                const std::string& word, int k) {
  if (k < 1) throw ContractError("k must be >= 1");
  detail::check_index_matches(loaded, index);
  const auto& model = loaded.checkpoint.model;
  const int row = model.vocab.lookup(word);
  if (row < 0) throw DataError("word '" + word + "' is not in the vocabulary");
  const int d = model.dim();
  std::vector<float> probe(model.embedding.data.begin() + static_cast<std::size_t>(row) * d,
                           model.embedding.data.begin() + static_cast<std::size_t>(row + 1) * d);

  NeighborResult out;
  {
    std::vector<std::pair<int, double>> scored;
    scored.reserve(model.vocab.size());
    for (int t = 0; t < model.vocab.size(); ++t) {
      const float* wt = model.embedding.data.data() + static_cast<std::size_t>(t) * d;
      scored.emplace_back(t, detail::dot_f32(wt, probe));
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    for (int i = 0; i < k && i < static_cast<int>(scored.size()); ++i) {
      out.words.emplace_back(model.vocab.word(scored[i].first), scored[i].second);
    }
  }
  {
    std::vector<std::pair<std::string, double>> scored;
    scored.reserve(index.ids.size());
    for (std::size_t i = 0; i < index.ids.size(); ++i) {
      scored.emplace_back(index.ids[i], detail::dot_f32(index.row(i), probe));
    }
    auto ranked = make_ranked_list("", std::move(scored), k);
    out.images = std::move(ranked.entries);
  }
  return out;
}

}  // namespace csm
