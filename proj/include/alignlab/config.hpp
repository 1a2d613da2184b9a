#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "alignlab/errors.hpp"

namespace alignlab {

/// Flat "key = value" configuration. '#' starts a comment. Every key must
/// be read by the consumer; leftover keys are reported as unknown.
class Config {
 public:
  static Config parse(const std::string& text, const std::string& what = "config") {
    Config c;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(what + ":" + std::to_string(lineno) + ": expected 'key = value'");
      }
      const auto key = trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError(what + ":" + std::to_string(lineno) + ": empty key");
      if (c.values_.count(key)) throw ConfigError(what + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
      c.values_[key] = unquote(trim(line.substr(eq + 1)));
    }
    return c;
  }

  static Config load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse(ss.str(), path.string());
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  /// Keys starting with `prefix`, in sorted order. Listing counts as use.
  std::vector<std::string> keys_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (k.rfind(prefix, 0) == 0) out.push_back(k), used_.insert(k);
    return out;
  }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    if (!has(key)) return used(key), fallback;
    return to_double(key, get_string(key, ""));
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    if (!has(key)) return used(key), fallback;
    const auto s = get_string(key, "");
    if (s.empty() || !std::all_of(s.begin(), s.end(), [](unsigned char ch) { return std::isdigit(ch); })) {
      throw ConfigError("config key '" + key + "' expects a nonnegative integer, got '" + s + "'");
    }
    return std::stoull(s);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return used(key), fallback;
    const auto s = get_string(key, "");
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config key '" + key + "' expects a boolean, got '" + s + "'");
  }

  /// Comma-separated list; "a:step:b" expands to an inclusive range.
  std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) const {
    if (!has(key)) return used(key), fallback;
    std::vector<double> out;
    std::istringstream ss(get_string(key, ""));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      tok = trim(tok);
      if (tok.empty()) continue;
      if (std::count(tok.begin(), tok.end(), ':') == 2) {
        const auto a = tok.find(':'), b = tok.rfind(':');
        const double lo = to_double(key, tok.substr(0, a)), step = to_double(key, tok.substr(a + 1, b - a - 1)),
                     hi = to_double(key, tok.substr(b + 1));
        if (!(step > 0)) throw ConfigError("config key '" + key + "': range step must be positive");
        const auto count = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
        for (std::size_t i = 0; i < count; ++i) out.push_back(lo + step * static_cast<double>(i));
      } else {
        out.push_back(to_double(key, tok));
      }
    }
    return out;
  }

  std::vector<std::size_t> get_sizes(const std::string& key, const std::vector<std::size_t>& fallback) const {
    if (!has(key)) return used(key), fallback;
    std::vector<std::size_t> out;
    for (double v : get_doubles(key, {})) {
      if (v < 0 || v != std::floor(v)) throw ConfigError("config key '" + key + "' expects nonnegative integers");
      out.push_back(static_cast<std::size_t>(v));
    }
    return out;
  }

  /// Throws ConfigError naming every key no consumer asked for.
  void reject_unknown() const {
    std::string unknown;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
    if (!unknown.empty()) throw ConfigError("unknown config keys: " + unknown);
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }
  static std::string unquote(const std::string& s) {
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\'')))
      return s.substr(1, s.size() - 2);
    return s;
  }
  static double to_double(const std::string& key, const std::string& s) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' expects a number, got '" + s + "'");
    }
  }
  void used(const std::string& key) const { used_.insert(key); }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace alignlab
