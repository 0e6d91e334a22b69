#pragma once

// Checkpoint file:
//   "DKSDCKPT", uint32 version, uint32 record count,
//   records: uint32 name length, name bytes, uint32 rank, rank x uint32 dims,
//            float32 data (row-major),
//   then the rest of the file is a UTF-8 JSON trailer.
// All integers and floats little-endian.

#include <filesystem>
#include <string>

#include "dksd/config.hpp"
#include "dksd/io.hpp"
#include "dksd/model.hpp"

namespace dksd {

inline constexpr std::string_view kCheckpointMagic = "DKSDCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ParameterTable<float> params;
  Json trailer;  ///< {"config": ..., "metadata": ...}

  Config config() const { return config_from_json(trailer.at("config")); }
  Json metadata() const { return trailer.value("metadata", Json::object()); }
};

inline bool is_bias_name(const std::string& name) { return name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0; }

inline std::string encode_checkpoint(const ParameterTable<float>& params, const Json& trailer) {
  std::string out(kCheckpointMagic);
  io::put_le<std::uint32_t>(out, kCheckpointVersion);
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.name(i);
    const auto& v = params.value(i);
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    io::put_le<std::uint32_t>(out, 2);
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(v.rows()));
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(v.cols()));
    for (Eigen::Index j = 0; j < v.size(); ++j) io::put_le<float>(out, v.data()[j]);
  }
  out += trailer.dump(2);
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& name = "checkpoint") {
  io::Reader r(bytes, name);
  if (r.bytes(8) != kCheckpointMagic) throw IoError(name + ": not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw IoError(name + ": unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  Checkpoint c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    const std::string pname(r.bytes(len));
    const auto rank = r.get<std::uint32_t>();
    if (rank < 1 || rank > 2) throw IoError(name + ": parameter '" + pname + "' has unsupported rank " + std::to_string(rank));
    Eigen::Index rows = 1, cols = r.get<std::uint32_t>();
    if (rank == 2) {
      rows = cols;
      cols = r.get<std::uint32_t>();
    }
    Matrix<float> v(rows, cols);
    for (Eigen::Index j = 0; j < v.size(); ++j) v.data()[j] = r.get<float>();
    c.params.add(pname, std::move(v), is_bias_name(pname));
  }
  try {
    c.trailer = Json::parse(r.bytes(r.remaining()));
  } catch (const Json::parse_error& e) {
    throw IoError(name + ": malformed JSON trailer: " + e.what());
  }
  return c;
}

inline void write_checkpoint(const std::filesystem::path& path, const ParameterTable<float>& params, const Json& trailer) {
  io::atomic_write(path, encode_checkpoint(params, trailer));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("checkpoint not found: '" + path.string() + "'");
  return decode_checkpoint(io::read_file(path), path.string());
}

}  // namespace dksd
