#pragma once

// Container file used for checkpoints, dataset exports and filter banks:
//
//   ALIGNLAB/<kind>/1\n
//   header_bytes=<N>\n
//   <N bytes of "key = value" lines>
//   <payload: little-endian float32 / int32 arrays, layout given by the kind>
//
// docs/FORMATS.md describes every kind.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "alignlab/errors.hpp"

namespace alignlab::io {

/// Ordered key/value header.
class Header {
 public:
  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) order_.push_back(key);
    values_[key] = value;
  }
  template <typename V>
  void set_value(const std::string& key, const V& v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    set(key, os.str());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw IngestionError("container header missing key '" + key + "'");
    return it->second;
  }
  std::size_t get_size(const std::string& key) const {
    try {
      return std::stoull(get(key));
    } catch (const std::invalid_argument&) {
      throw IngestionError("container header key '" + key + "' is not an integer");
    }
  }

  std::string text() const {
    std::string s;
    for (const auto& k : order_) s += k + " = " + values_.at(k) + "\n";
    return s;
  }

  static Header parse(const std::string& text) {
    Header h;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto eq = line.find(" = ");
      if (eq == std::string::npos) throw IngestionError("bad container header line '" + line + "'");
      h.set(line.substr(0, eq), line.substr(eq + 3));
    }
    return h;
  }

 private:
  std::vector<std::string> order_;
  std::map<std::string, std::string> values_;
};

template <typename V>
void write_le(std::ostream& os, const V* data, std::size_t n) {
  static_assert(sizeof(V) == 4);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(V)));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u;
      std::memcpy(&u, data + i, 4);
      u = __builtin_bswap32(u);
      os.write(reinterpret_cast<const char*>(&u), 4);
    }
  }
}

template <typename V>
void read_le(std::istream& is, V* data, std::size_t n, const std::string& what) {
  static_assert(sizeof(V) == 4);
  is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(V)));
  if (static_cast<std::size_t>(is.gcount()) != n * sizeof(V)) throw IngestionError(what + ": truncated payload");
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u;
      std::memcpy(&u, data + i, 4);
      u = __builtin_bswap32(u);
      std::memcpy(data + i, &u, 4);
    }
  }
}

inline void write_container_header(std::ostream& os, const std::string& kind, const Header& h) {
  const auto text = h.text();
  os << "ALIGNLAB/" << kind << "/1\n" << "header_bytes=" << text.size() << "\n" << text;
}

inline Header read_container_header(std::istream& is, const std::string& kind, const std::string& what) {
  std::string magic;
  std::getline(is, magic);
  if (magic != "ALIGNLAB/" + kind + "/1") throw IngestionError(what + ": not an ALIGNLAB " + kind + " container");
  std::string len_line;
  std::getline(is, len_line);
  const std::string prefix = "header_bytes=";
  if (len_line.rfind(prefix, 0) != 0) throw IngestionError(what + ": missing header_bytes");
  const auto len = std::stoull(len_line.substr(prefix.size()));
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (static_cast<std::size_t>(is.gcount()) != len) throw IngestionError(what + ": truncated header");
  return Header::parse(text);
}

/// Writes through a temporary file and renames it into place.
template <typename Fn>
void write_atomically(const std::filesystem::path& path, Fn&& fill, bool binary = true) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, binary ? std::ios::binary : std::ios::out);
    if (!os) throw Error("cannot write " + tmp.string());
    fill(os);
    os.flush();
    if (!os) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace alignlab::io
