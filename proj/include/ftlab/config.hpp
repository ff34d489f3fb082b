#pragma once

// Declarative experiment configs: flat "section.key = value" lines, '#'
// comments, no duplicate keys. Each command validates against its own
// allowed-key set, so an unknown or misspelled key fails loudly by name.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>

#include <ftlab/errors.hpp>

namespace ftlab {

class KeyValueConfig {
 public:
  static KeyValueConfig parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    KeyValueConfig cfg;
    cfg.path_ = path;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::string stripped = trim(line);
      if (stripped.empty() || stripped[0] == '#') continue;
      const std::size_t eq = stripped.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key = value");
      const std::string key = trim(stripped.substr(0, eq));
      const std::string value = trim(stripped.substr(eq + 1));
      if (key.empty())
        throw ConfigError(path + ":" + std::to_string(line_no) + ": empty key");
      if (!cfg.values_.emplace(key, value).second)
        throw ConfigError(path + ":" + std::to_string(line_no) + ": duplicate key \"" + key + "\"");
    }
    return cfg;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& path() const { return path_; }
  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string get_string(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError(path_ + ": missing required key \"" + key + "\"");
    return it->second;
  }
  std::string get_string(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  long get_int(const std::string& key) const { return parse_int(key, get_string(key)); }
  long get_int(const std::string& key, long fallback) const {
    return has(key) ? get_int(key) : fallback;
  }

  std::uint64_t get_u64(const std::string& key) const { return parse_u64(key, get_string(key)); }
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    return has(key) ? get_u64(key) : fallback;
  }

  double get_double(const std::string& key) const { return parse_double(key, get_string(key)); }
  double get_double(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
  }

  bool get_bool(const std::string& key) const {
    const std::string v = get_string(key);
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError(path_ + ": key \"" + key + "\" must be true or false, got \"" + v + "\"");
  }
  bool get_bool(const std::string& key, bool fallback) const {
    return has(key) ? get_bool(key) : fallback;
  }

  // Rejects any key outside the schema, naming the first offender.
  void check_allowed(std::span<const char* const> allowed) const {
    const std::set<std::string> schema(allowed.begin(), allowed.end());
    for (const auto& [key, value] : values_)
      if (!schema.count(key))
        throw ConfigError(path_ + ": unknown key \"" + key + "\"");
  }

 private:
  static std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && (s[a] == ' ' || s[a] == '\t' || s[a] == '\r')) ++a;
    while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r')) --b;
    return s.substr(a, b - a);
  }

  long parse_int(const std::string& key, const std::string& v) const {
    long out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
      throw ConfigError(path_ + ": key \"" + key + "\" expects an integer, got \"" + v + "\"");
    return out;
  }
  std::uint64_t parse_u64(const std::string& key, const std::string& v) const {
    std::uint64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
      throw ConfigError(path_ + ": key \"" + key + "\" expects an unsigned integer, got \"" + v +
                        "\"");
    return out;
  }
  double parse_double(const std::string& key, const std::string& v) const {
    double out = 0.0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
      throw ConfigError(path_ + ": key \"" + key + "\" expects a number, got \"" + v + "\"");
    return out;
  }

  std::string path_;
  std::map<std::string, std::string> values_;
};

}  // namespace ftlab
