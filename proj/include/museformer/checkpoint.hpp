#pragma once

// Checkpoint file layout (little-endian):
//   magic "MSFMCKPT" | u32 version | u64 header length | JSON header
//   | f64 tensor data in ModelParams::each order | u32 CRC-32 of all prior bytes
// The header records the model config, the vocabulary hash and every
// tensor's name and shape.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "json.hpp"
#include "museformer/model.hpp"

namespace museformer {

inline constexpr char kCheckpointMagic[8] = {'M', 'S', 'F', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VocabMismatch : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

namespace detail {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  out.insert(out.end(), bytes, bytes + sizeof(T));
}

template <typename T>
T get(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw CheckpointError("checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

struct Checkpoint {
  ModelConfig config;
  ModelParams<double> params;
  nlohmann::json metadata = nlohmann::json::object();
};

template <typename S>
std::vector<std::uint8_t> serialize_checkpoint(const ModelConfig& config, const ModelParams<S>& params,
                                               const nlohmann::json& metadata = nlohmann::json::object()) {
  nlohmann::json header;
  header["config"] = config;
  header["vocab_hash"] = hash_hex(Vocabulary::hash());
  header["metadata"] = metadata;
  nlohmann::json tensors = nlohmann::json::array();
  params.for_each([&](const std::string& name, const Matrix<S>& m) {
    tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  });
  header["tensors"] = tensors;
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  params.for_each([&](const std::string&, const Matrix<S>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) detail::put<double>(out, static_cast<double>(m.data()[i]));
  });
  detail::put<std::uint32_t>(out, detail::crc32_of(out.data(), out.size()));
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& in) {
  if (in.size() < 8 + 4 + 8 + 4 || std::memcmp(in.data(), kCheckpointMagic, 8) != 0)
    throw CheckpointError("not a museformer checkpoint");
  std::size_t tail = in.size() - 4;
  std::size_t crc_pos = tail;
  if (detail::get<std::uint32_t>(in, crc_pos) != detail::crc32_of(in.data(), tail))
    throw CheckpointError("checkpoint checksum mismatch");
  std::size_t pos = 8;
  const auto version = detail::get<std::uint32_t>(in, pos);
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto header_len = detail::get<std::uint64_t>(in, pos);
  if (pos + header_len > tail) throw CheckpointError("checkpoint truncated");
  nlohmann::json header = nlohmann::json::parse(in.begin() + static_cast<std::ptrdiff_t>(pos),
                                                in.begin() + static_cast<std::ptrdiff_t>(pos + header_len));
  pos += header_len;
  if (header.at("vocab_hash").get<std::string>() != hash_hex(Vocabulary::hash()))
    throw VocabMismatch("checkpoint vocabulary hash differs from this build's vocabulary");

  Checkpoint ck;
  ck.config = header.at("config").get<ModelConfig>();
  ck.metadata = header.value("metadata", nlohmann::json::object());
  ck.params = ModelParams<double>::zeros(ck.config);
  const auto& tensors = header.at("tensors");
  std::size_t index = 0;
  ck.params.for_each([&](const std::string& name, Matrix<double>& m) {
    if (index >= tensors.size()) throw CheckpointError("checkpoint is missing tensor " + name);
    const auto& t = tensors[index++];
    if (t.at("name").get<std::string>() != name || t.at("rows").get<Eigen::Index>() != m.rows() ||
        t.at("cols").get<Eigen::Index>() != m.cols())
      throw CheckpointError("checkpoint tensor " + name + " does not match the config");
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      if (pos + 8 > tail) throw CheckpointError("checkpoint truncated");
      m.data()[i] = detail::get<double>(in, pos);
    }
  });
  if (index != tensors.size() || pos != tail) throw CheckpointError("checkpoint has unexpected trailing tensors");
  return ck;
}

template <typename S>
void save_checkpoint(const std::string& path, const ModelConfig& config, const ModelParams<S>& params,
                     const nlohmann::json& metadata = nlohmann::json::object()) {
  auto bytes = serialize_checkpoint(config, params, metadata);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace museformer
