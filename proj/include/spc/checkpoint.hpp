#pragma once

// Model checkpoints, format "SSCK" (little-endian):
//   magic 'S''S''C''K'
//   u32 format version (1)
//   32 bytes  SHA-256 of the backing dictionary's serialized form
//             (all zero when the model has no dictionary front end)
//   u32 config blob length, then that many bytes of canonical config JSON
//   u32 tensor count
//   per tensor: u32 name length, name bytes, u32 rank, u32 extents[rank],
//               fp32 values in row-major order
//
// Tensors are stored fp32 regardless of the in-memory compute type; loading
// verifies names, shapes, and the dictionary binding before touching the
// destination model.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "spc/common.hpp"
#include "spc/dictionary.hpp"
#include "spc/hash.hpp"
#include "spc/models.hpp"

namespace spc {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensorF {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct CheckpointData {
  std::uint32_t version = kCheckpointVersion;
  Sha256 dict_hash{};  // zero = no dictionary
  std::string config_json;
  std::vector<NamedTensorF> tensors;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  const std::size_t at = out.size();
  out.resize(at + 4);
  std::memcpy(out.data() + at, &v, 4);
}

inline void put_bytes(std::vector<std::uint8_t>& out, const void* p,
                      std::size_t n) {
  const std::size_t at = out.size();
  out.resize(at + n);
  std::memcpy(out.data() + at, p, n);
}

struct ByteReader {
  const std::uint8_t* p;
  std::size_t len, at = 0;

  void need(std::size_t n) const {
    if (at + n > len) throw DataError("checkpoint truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, p + at, 4);
    at += 4;
    return v;
  }
  void bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, p + at, n);
    at += n;
  }
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const CheckpointData& c) {
  std::vector<std::uint8_t> out;
  detail::put_bytes(out, "SSCK", 4);
  detail::put_u32(out, c.version);
  detail::put_bytes(out, c.dict_hash.data(), 32);
  detail::put_u32(out, static_cast<std::uint32_t>(c.config_json.size()));
  detail::put_bytes(out, c.config_json.data(), c.config_json.size());
  detail::put_u32(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const NamedTensorF& t : c.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    detail::put_bytes(out, t.name.data(), t.name.size());
    detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int e : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(e));
    detail::put_bytes(out, t.values.data(), t.values.size() * 4);
  }
  return out;
}

inline CheckpointData deserialize_checkpoint(const std::uint8_t* bytes,
                                             std::size_t len) {
  detail::ByteReader r{bytes, len};
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "SSCK", 4) != 0)
    throw DataError("not a checkpoint file (bad magic)");
  CheckpointData c;
  c.version = r.u32();
  if (c.version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(c.version));
  r.bytes(c.dict_hash.data(), 32);
  const std::uint32_t cfg_len = r.u32();
  r.need(cfg_len);
  c.config_json.assign(reinterpret_cast<const char*>(bytes + r.at), cfg_len);
  r.at += cfg_len;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensorF t;
    const std::uint32_t name_len = r.u32();
    r.need(name_len);
    t.name.assign(reinterpret_cast<const char*>(bytes + r.at), name_len);
    r.at += name_len;
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw DataError("checkpoint tensor rank out of range");
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t e = r.u32();
      if (e == 0 || e > (1u << 28)) throw DataError("checkpoint extent out of range");
      t.shape.push_back(static_cast<int>(e));
      n *= e;
    }
    t.values.resize(n);
    r.bytes(t.values.data(), n * 4);
    c.tensors.push_back(std::move(t));
  }
  if (r.at != len) throw DataError("checkpoint has trailing bytes");
  return c;
}

inline void save_checkpoint_file(const CheckpointData& c, const std::string& path) {
  const auto bytes = serialize_checkpoint(c);
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw DataError("cannot write checkpoint: " + path);
  const std::size_t n = std::fwrite(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  if (n != bytes.size()) throw DataError("short write: " + path);
}

inline CheckpointData load_checkpoint_file(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw DataError("cannot read checkpoint: " + path);
  std::fseek(f, 0, SEEK_END);
  const long sz = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<std::uint8_t> bytes(sz > 0 ? static_cast<std::size_t>(sz) : 0);
  const std::size_t n = bytes.empty() ? 0 : std::fread(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  if (n != bytes.size()) throw DataError("short read: " + path);
  return deserialize_checkpoint(bytes.data(), bytes.size());
}

// ---------------------------------------------------------------------------
// Model binding.

template <class T>
std::vector<std::pair<std::string, Tensor<T>*>> named_parameters(
    DefenseModel<T>& model) {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  if (model.front == FrontEnd::kSparse) {
    for (std::size_t i = 0; i < model.decoder.layers.size(); ++i) {
      const std::string base = "decoder." + std::to_string(i) + ".";
      out.emplace_back(base + "kernel", &model.decoder.layers[i].kernel);
      out.emplace_back(base + "bias", &model.decoder.layers[i].bias);
    }
  }
  ClassifierNet<T>& c = model.classifier;
  const std::pair<const char*, Conv2d<T>*> convs[] = {
      {"stem", &c.stem},       {"block1a", &c.block1a}, {"block1b", &c.block1b},
      {"down1", &c.down1},     {"block2a", &c.block2a}, {"block2b", &c.block2b},
      {"down2", &c.down2},     {"block3a", &c.block3a}, {"block3b", &c.block3b}};
  for (const auto& [name, conv] : convs) {
    out.emplace_back(std::string("classifier.") + name + ".kernel", &conv->kernel);
    out.emplace_back(std::string("classifier.") + name + ".bias", &conv->bias);
  }
  out.emplace_back("classifier.fc.weight", &c.fc_weight);
  out.emplace_back("classifier.fc.bias", &c.fc_bias);
  return out;
}

template <class T>
CheckpointData checkpoint_from_model(DefenseModel<T>& model,
                                     const std::string& config_json) {
  CheckpointData c;
  c.config_json = config_json;
  if (model.front == FrontEnd::kSparse) c.dict_hash = dictionary_hash(model.dict);
  for (auto& [name, tensor] : named_parameters(model)) {
    NamedTensorF t;
    t.name = name;
    t.shape = tensor->shape();
    t.values.reserve(tensor->value().size());
    for (T v : tensor->value()) t.values.push_back(static_cast<float>(v));
    c.tensors.push_back(std::move(t));
  }
  return c;
}

// Fills a geometry-matching model's parameters.  The model must carry the
// same dictionary the checkpoint was written against (zero hash = identity
// front), and every stored tensor must match by position, name, and shape.
template <class T>
void load_checkpoint_into_model(const CheckpointData& c, DefenseModel<T>& model) {
  Sha256 expect{};
  if (model.front == FrontEnd::kSparse) expect = dictionary_hash(model.dict);
  if (expect != c.dict_hash)
    throw DataError("checkpoint was written against a different dictionary");
  auto params = named_parameters(model);
  if (params.size() != c.tensors.size())
    throw DataError("checkpoint tensor count does not match model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const NamedTensorF& t = c.tensors[i];
    if (t.name != params[i].first)
      throw DataError("checkpoint tensor '" + t.name + "' where '" +
                      params[i].first + "' was expected");
    if (t.shape != params[i].second->shape())
      throw DataError("checkpoint tensor '" + t.name + "' shape mismatch");
    std::vector<T>& dst = params[i].second->value();
    for (std::size_t k = 0; k < dst.size(); ++k)
      dst[k] = static_cast<T>(t.values[k]);
  }
}

}  // namespace spc
