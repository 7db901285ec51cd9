#pragma once

#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "brr/error.hpp"

namespace brr {

/// Key-value text with sections. Grammar, one item per line:
///
///   # comment            (also ';'; a '#' after whitespace starts a trailing comment)
///   [section]            (dotted names such as [gbm.grid] nest sections)
///   key = value          (stored as "section.key"; lists are comma separated)
///
/// Keys before the first section header are stored without a prefix.
class ConfigFile {
 public:
  static ConfigFile parse(std::string_view text) {
    ConfigFile cfg;
    std::string section;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      std::size_t eol = text.find('\n', pos);
      if (eol == std::string_view::npos) eol = text.size();
      std::string line(text.substr(pos, eol - pos));
      pos = eol + 1;
      ++line_no;
      line = strip_comment(line);
      line = trim(line);
      if (line.empty()) {
        if (eol == text.size()) break;
        continue;
      }
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": unterminated section");
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty() || !valid_name(section))
          throw ConfigError("config line " + std::to_string(line_no) + ": bad section name '" + section + "'");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty() || !valid_name(key))
        throw ConfigError("config line " + std::to_string(line_no) + ": bad key '" + key + "'");
      const std::string full = section.empty() ? key : section + "." + key;
      if (cfg.values_.count(full)) throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + full + "'");
      cfg.values_[full] = value;
      cfg.order_.push_back(full);
      if (eol == text.size()) break;
    }
    return cfg;
  }

  static ConfigFile load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  const std::map<std::string, std::string>& values() const { return values_; }
  const std::vector<std::string>& keys() const { return order_; }
  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
  }

  static std::string trim(std::string_view s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return std::string(s.substr(a, b - a));
  }

  static std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
      std::size_t comma = s.find(',', start);
      if (comma == std::string_view::npos) comma = s.size();
      std::string item = trim(s.substr(start, comma - start));
      if (item.empty()) throw ConfigError("empty item in list '" + std::string(s) + "'");
      out.push_back(std::move(item));
      start = comma + 1;
    }
    return out;
  }

 private:
  static std::string strip_comment(const std::string& line) {
    const std::string t = trim(line);
    if (!t.empty() && (t.front() == '#' || t.front() == ';')) return {};
    for (std::size_t i = 1; i < line.size(); ++i)
      if (line[i] == '#' && std::isspace(static_cast<unsigned char>(line[i - 1]))) return line.substr(0, i);
    return line;
  }

  static bool valid_name(const std::string& s) {
    for (char c : s)
      if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-')) return false;
    return true;
  }

  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

// Value parsers; errors name the key.

inline double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

inline std::uint64_t parse_unsigned(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError("config key '" + key + "': expected a nonnegative integer, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "no" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

inline std::vector<double> parse_real_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& s : ConfigFile::split_list(v)) out.push_back(parse_real(key, s));
  return out;
}

inline std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& s : ConfigFile::split_list(v)) out.push_back(static_cast<std::size_t>(parse_unsigned(key, s)));
  return out;
}

}  // namespace brr
