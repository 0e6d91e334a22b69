#pragma once

// Manifests (utterance_id, speaker_id, path as TSV) and the per-utterance
// binary feature cache: "DKSDFEAT", uint32 T, uint32 F, T*F float32, all
// little-endian, row-major.

#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dksd/autodiff.hpp"
#include "dksd/io.hpp"

namespace dksd {

namespace fs = std::filesystem;

struct UtteranceRecord {
  std::string utterance_id;
  std::string speaker_id;
  std::string path;
};

struct Manifest {
  std::vector<UtteranceRecord> records;
  fs::path base;  ///< relative record paths resolve against this directory

  fs::path resolve(const UtteranceRecord& r) const {
    const fs::path p(r.path);
    return p.is_absolute() || base.empty() ? p : base / p;
  }

  std::vector<std::string> speakers() const {
    std::set<std::string> s;
    for (const auto& r : records) s.insert(r.speaker_id);
    return {s.begin(), s.end()};
  }
};

inline Manifest parse_manifest(const std::string& text, const std::string& name = "manifest") {
  Manifest m;
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1) f.push_back(line.substr(start, tab - start));
    f.push_back(line.substr(start));
    if (f.size() != 3) {
      throw ValidationError(name + ":" + std::to_string(line_no) + ": expected 3 tab-separated fields, got " + std::to_string(f.size()));
    }
    if (f[0].empty() || f[1].empty()) throw ValidationError(name + ":" + std::to_string(line_no) + ": empty utterance or speaker id");
    if (!seen.insert(f[0]).second) throw ValidationError(name + ":" + std::to_string(line_no) + ": duplicate utterance id '" + f[0] + "'");
    m.records.push_back({f[0], f[1], f[2]});
  }
  return m;
}

inline Manifest read_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("manifest not found: '" + path.string() + "'");
  Manifest m = parse_manifest(io::read_file(path), path.string());
  m.base = path.parent_path();
  return m;
}

inline std::string format_manifest(const Manifest& m) {
  std::string out;
  for (const auto& r : m.records) out += r.utterance_id + "\t" + r.speaker_id + "\t" + r.path + "\n";
  return out;
}

inline void write_manifest(const fs::path& path, const Manifest& m) { io::atomic_write(path, format_manifest(m)); }

inline constexpr std::string_view kFeatureMagic = "DKSDFEAT";

template <class Derived>
std::string encode_features(const Eigen::MatrixBase<Derived>& x) {
  std::string out(kFeatureMagic);
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(x.rows()));
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(x.cols()));
  out.reserve(out.size() + 4 * static_cast<std::size_t>(x.size()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) io::put_le<float>(out, static_cast<float>(x(r, c)));
  }
  return out;
}

inline Matrix<float> decode_features(std::string_view bytes, const std::string& name = "features") {
  io::Reader r(bytes, name);
  if (r.bytes(8) != kFeatureMagic) throw IoError(name + ": bad feature-cache magic");
  const auto t = r.get<std::uint32_t>();
  const auto f = r.get<std::uint32_t>();
  Matrix<float> x(t, f);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = r.get<float>();
  if (r.remaining() != 0) throw IoError(name + ": trailing bytes after feature payload");
  return x;
}

template <class Derived>
void write_features(const fs::path& path, const Eigen::MatrixBase<Derived>& x) {
  io::atomic_write(path, encode_features(x));
}

inline Matrix<float> read_features(const fs::path& path) { return decode_features(io::read_file(path), path.string()); }

/// Features of every record, in manifest order. Missing files are collected
/// and reported together.
inline std::vector<Matrix<float>> load_features(const Manifest& m) {
  std::vector<std::string> missing;
  for (const auto& r : m.records) {
    if (!fs::exists(m.resolve(r))) missing.push_back(r.utterance_id);
  }
  if (!missing.empty()) {
    std::string list;
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) list += (i ? ", " : "") + missing[i];
    if (missing.size() > 20) list += ", ... (" + std::to_string(missing.size()) + " total)";
    throw ValidationError("missing cached features for: " + list);
  }
  std::vector<Matrix<float>> out;
  out.reserve(m.records.size());
  for (const auto& r : m.records) out.push_back(read_features(m.resolve(r)));
  return out;
}

}  // namespace dksd
