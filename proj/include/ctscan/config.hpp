#pragma once

// "key = value" files: one pair per line, '#' starts a comment, keys are
// flat dotted names. Used for run configs and checkpoint companions.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ctscan/error.hpp"

namespace ctscan {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

class KeyValues {
 public:
  static KeyValues parse(std::istream& in, const std::string& source) {
    KeyValues kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      const std::string where = source + ":" + std::to_string(lineno);
      if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
      std::string key = trim(std::string_view(t).substr(0, eq));
      std::string value = trim(std::string_view(t).substr(eq + 1));
      if (key.empty()) throw ConfigError(where + ": empty key");
      if (kv.index_.count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
      kv.index_[key] = kv.entries_.size();
      kv.entries_.emplace_back(std::move(key), std::move(value));
    }
    return kv;
  }

  static KeyValues parse_text(const std::string& text, const std::string& source = "<text>") {
    std::istringstream in(text);
    return parse(in, source);
  }

  static KeyValues read(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    return parse(in, path.string());
  }

  void set(const std::string& key, std::string value) {
    if (auto it = index_.find(key); it != index_.end()) {
      entries_[it->second].second = std::move(value);
    } else {
      index_[key] = entries_.size();
      entries_.emplace_back(key, std::move(value));
    }
  }

  bool has(const std::string& key) const { return index_.count(key) > 0; }
  std::optional<std::string> get(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    return entries_[it->second].second;
  }
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  /// Rejects any key outside `known`.
  void require_known(const std::set<std::string>& known, const std::string& source) const {
    for (const auto& [k, v] : entries_) {
      if (!known.count(k)) throw ConfigError(source + ": unknown key '" + k + "'");
    }
  }

  std::string format() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
    return out;
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << format();
    if (!os) throw IoError("write failed for " + path.string());
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace kv {

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(to_u64(key, v));
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::logic_error&) {
  }
  throw ConfigError(key + ": expected a number, got '" + v + "'");
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline std::vector<std::size_t> to_size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_size(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": expected a comma-separated list");
  return out;
}

inline std::string from_double(double d) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  // Shortest form that still round-trips.
  for (int prec = 1; prec <= 17; ++prec) {
    char tmp[32];
    std::snprintf(tmp, sizeof tmp, "%.*g", prec, d);
    if (std::stod(tmp) == d) return tmp;
  }
  return buf;
}

inline std::string from_bool(bool b) { return b ? "true" : "false"; }

inline std::string from_size_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

// Assign from `src[key]` when present.
inline void read(const KeyValues& src, const std::string& key, std::size_t& out) {
  if (auto v = src.get(key)) out = to_size(key, *v);
}
inline void read(const KeyValues& src, const std::string& key, double& out) {
  if (auto v = src.get(key)) out = to_double(key, *v);
}
inline void read(const KeyValues& src, const std::string& key, bool& out) {
  if (auto v = src.get(key)) out = to_bool(key, *v);
}
inline void read(const KeyValues& src, const std::string& key, std::string& out) {
  if (auto v = src.get(key)) out = *v;
}
inline void read(const KeyValues& src, const std::string& key, std::vector<std::size_t>& out) {
  if (auto v = src.get(key)) out = to_size_list(key, *v);
}

}  // namespace kv
}  // namespace ctscan
