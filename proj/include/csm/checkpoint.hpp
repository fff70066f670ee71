// Model checkpoint format (.csm): magic "CSMM", u32 version=1, u32 header
// length, JSON header (network spec, input shape, vocabulary, idf, digests),
// u64 parameter float count, then the parameter blocks as little-endian f32
// in declared order: per layer weight then bias, then the embedding table.
// Round-trips are byte-exact.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "csm/errors.hpp"
#include "csm/io_util.hpp"
#include "csm/model.hpp"
#include "json.hpp"

namespace csm {

struct ModelCheckpoint {
  std::uint32_t version = 1;
  TwoTowerModel<float> model;
  std::string train_config_digest;
  std::uint64_t seed = 0;
};

inline std::vector<unsigned char> serialize_checkpoint(const ModelCheckpoint& cp) {
  nlohmann::json header{{"version", cp.version},
                        {"network", cp.model.spec},
                        {"input_shape", cp.model.input_shape},
                        {"embedding_dim", cp.model.dim()},
                        {"vocab", cp.model.vocab.words()},
                        {"idf", cp.model.idf.idf},
                        {"train_config_digest", cp.train_config_digest},
                        {"seed", cp.seed}};
  const std::string header_bytes = header.dump();

  ByteWriter w;
  w.put_string("CSMM");
  w.put_u32(cp.version);
  w.put_u32(static_cast<std::uint32_t>(header_bytes.size()));
  w.put_string(header_bytes);
  std::uint64_t float_count = cp.model.net.count() + cp.model.embedding.size();
  w.put_u64(float_count);
  cp.model.net.for_each_tensor(
      [&](const Tensor<float>& t) { w.put_f32_array(t.data.data(), t.data.size()); });
  w.put_f32_array(cp.model.embedding.data.data(), cp.model.embedding.size());
  return w.bytes();
}

inline ModelCheckpoint parse_checkpoint(const std::vector<unsigned char>& bytes) {
  ByteReader r(bytes);
  if (r.get_string(4, "magic") != "CSMM") throw ParseError("bad checkpoint magic", 0);
  ModelCheckpoint cp;
  cp.version = r.get_u32("version");
  if (cp.version != 1) {
    throw ParseError("unsupported checkpoint version " + std::to_string(cp.version), 4);
  }
  const auto header_len = r.get_u32("header length");
  const std::size_t header_at = r.offset();
  const std::string header_bytes = r.get_string(header_len, "header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_bytes);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed checkpoint header: ") + e.what(), header_at);
  }
  try {
    cp.model.spec = header.at("network").get<NetworkSpec>();
    cp.model.input_shape = header.at("input_shape").get<std::vector<int>>();
    cp.model.vocab = Vocabulary(header.at("vocab").get<std::vector<std::string>>());
    cp.model.idf.idf = header.at("idf").get<std::vector<double>>();
    cp.train_config_digest = header.value("train_config_digest", std::string());
    cp.seed = header.value("seed", std::uint64_t(0));
    const int d = header.at("embedding_dim").get<int>();
    cp.model.embedding = Tensor<float>({cp.model.vocab.size(), d});
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header fields: ") + e.what(), header_at);
  }
  if (static_cast<int>(cp.model.idf.idf.size()) != cp.model.vocab.size()) {
    throw DataError("checkpoint idf table size does not match vocabulary size");
  }
  // Shapes come from the spec; this also validates it against the input shape.
  cp.model.net = init_params<float>(cp.model.spec, cp.model.input_shape, 0);
  if (output_dim(cp.model.spec, cp.model.input_shape) != cp.model.dim()) {
    throw DataError("checkpoint network output dimension does not match embedding_dim");
  }
  const std::uint64_t expect = cp.model.net.count() + cp.model.embedding.size();
  const std::uint64_t declared = r.get_u64("parameter count");
  if (declared != expect) {
    throw ParseError("parameter count " + std::to_string(declared) + " does not match shapes (" +
                         std::to_string(expect) + ")",
                     r.offset() - 8);
  }
  cp.model.net.for_each_tensor(
      [&](Tensor<float>& t) { r.get_f32_array(t.data.data(), t.data.size(), "parameters"); });
  r.get_f32_array(cp.model.embedding.data.data(), cp.model.embedding.size(), "embedding table");
  if (r.remaining() != 0) throw ParseError("unexpected trailing data", r.offset());
  return cp;
}

inline std::string checkpoint_digest(const std::vector<unsigned char>& bytes) {
  return hex64(fnv1a64(bytes.data(), bytes.size()));
}

inline void save_checkpoint(const std::string& path, const ModelCheckpoint& cp) {
  write_file_bytes(path, serialize_checkpoint(cp));
}

struct LoadedCheckpoint {
  ModelCheckpoint checkpoint;
  std::string digest;  // over the serialized bytes
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  LoadedCheckpoint out;
  try {
    out.checkpoint = parse_checkpoint(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what(), e.offset());
  }
  out.digest = checkpoint_digest(bytes);
  return out;
}

}  // namespace csm
