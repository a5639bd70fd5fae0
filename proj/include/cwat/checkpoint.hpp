#pragma once

// Binary checkpoint:
//   "CWATCKPT" | u32 version | u64 len + config text | u64 len + meta text |
//   u64 layer count | per layer: u64 len + name, u32 ndim, u64 dims..., f64 data...
// Config and meta are "key = value" lines. Little-endian host assumed.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "cwat/error.hpp"
#include "cwat/tensor.hpp"
#include "cwat/text.hpp"

namespace cwat {

inline constexpr char kCheckpointMagic[8] = {'C', 'W', 'A', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  text::KeyValues config;
  text::KeyValues meta;
  std::map<std::string, Tensor> layers;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

inline std::string kv_text(const text::KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

inline text::KeyValues parse_kv_text(const std::string& s) {
  text::KeyValues kv;
  std::istringstream in(s);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) fail(ErrorCategory::data, "corrupt checkpoint record '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return kv;
}

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <class T>
T get(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) fail(ErrorCategory::data, path + ": truncated checkpoint");
  return v;
}

inline std::string get_string(std::istream& in, const std::string& path) {
  const auto n = get<std::uint64_t>(in, path);
  if (n > (1ULL << 32)) fail(ErrorCategory::data, path + ": corrupt checkpoint string length");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) fail(ErrorCategory::data, path + ": truncated checkpoint");
  return s;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) fail(ErrorCategory::io, "cannot write " + tmp.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put<std::uint32_t>(out, kCheckpointVersion);
    detail::put_string(out, detail::kv_text(ck.config));
    detail::put_string(out, detail::kv_text(ck.meta));
    detail::put<std::uint64_t>(out, ck.layers.size());
    for (const auto& [name, t] : ck.layers) {
      detail::put_string(out, name);
      detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
      for (std::size_t d : t.shape) detail::put<std::uint64_t>(out, d);
      out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    if (!out) fail(ErrorCategory::io, "failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCategory::io, "cannot open checkpoint " + p);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) fail(ErrorCategory::data, p + ": not a checkpoint");
  const auto version = detail::get<std::uint32_t>(in, p);
  if (version != kCheckpointVersion) fail(ErrorCategory::data, p + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.config = detail::parse_kv_text(detail::get_string(in, p));
  ck.meta = detail::parse_kv_text(detail::get_string(in, p));
  const auto count = detail::get<std::uint64_t>(in, p);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = detail::get_string(in, p);
    const auto ndim = detail::get<std::uint32_t>(in, p);
    if (ndim > 8) fail(ErrorCategory::data, p + ": layer '" + name + "' has corrupt rank");
    Shape shape(ndim);
    for (auto& d : shape) d = detail::get<std::uint64_t>(in, p);
    const std::size_t n = numel(shape);
    if (n > (1ULL << 31)) fail(ErrorCategory::data, p + ": layer '" + name + "' is implausibly large");
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) fail(ErrorCategory::data, p + ": truncated layer '" + name + "'");
    ck.layers.emplace(std::move(name), std::move(t));
  }
  return ck;
}

}  // namespace cwat
