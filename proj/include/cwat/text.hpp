#pragma once

// Small helpers for the plain-text formats (manifests, configs, reports).

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cwat/error.hpp"

namespace cwat::text {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline std::optional<double> try_parse_double(std::string_view s) {
  const std::string t = trim(s);
  if (t == "inf" || t == "+inf" || t == "infinity") return std::numeric_limits<double>::infinity();
  if (t.empty()) return std::nullopt;
  double v = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size()) return std::nullopt;
  return v;
}

inline std::optional<long long> try_parse_int(std::string_view s) {
  const std::string t = trim(s);
  long long v = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) return std::nullopt;
  return v;
}

inline std::string join_doubles(const std::vector<double>& v, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += format_double(v[i]);
  }
  return out;
}

/// Ordered "key = value" records; '#' starts a comment.
using KeyValues = std::map<std::string, std::string>;

inline KeyValues read_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCategory::io, "cannot open " + path);
  KeyValues out;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    const std::string body = trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      fail(ErrorCategory::config, path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    out[trim(std::string_view(body).substr(0, eq))] = trim(std::string_view(body).substr(eq + 1));
  }
  return out;
}

inline void write_key_values(const std::string& path, const KeyValues& kv) {
  std::ofstream out(path);
  if (!out) fail(ErrorCategory::io, "cannot write " + path);
  for (const auto& [k, v] : kv) out << k << " = " << v << "\n";
}

}  // namespace cwat::text
