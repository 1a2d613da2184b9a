#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "alignlab/io/container.hpp"

namespace alignlab::io {

/// Nine significant digits, '.' separator, independent of the C locale.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 9);
  return std::string(buf, res.ptr);
}

using Cell = std::variant<std::string, double, long long>;

inline std::string format_cell(const Cell& c) {
  if (auto s = std::get_if<std::string>(&c)) return *s;
  if (auto d = std::get_if<double>(&c)) return format_number(*d);
  return std::to_string(std::get<long long>(c));
}

/// In-memory CSV table written atomically with '\n' line endings.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> columns) : columns_(std::move(columns)) {}

  void add_row(std::vector<Cell> row) {
    if (row.size() != columns_.size()) throw ArgumentError("CSV row has wrong number of cells");
    rows_.push_back(std::move(row));
  }

  std::size_t rows() const { return rows_.size(); }
  const std::vector<std::string>& columns() const { return columns_; }

  std::string str() const {
    std::string out;
    for (std::size_t i = 0; i < columns_.size(); ++i) out += (i ? "," : "") + columns_[i];
    out += '\n';
    for (const auto& r : rows_) {
      for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + format_cell(r[i]);
      out += '\n';
    }
    return out;
  }

  void write(const std::filesystem::path& path) const {
    const auto s = str();
    write_atomically(path, [&](std::ostream& os) { os << s; });
  }

 private:
  std::vector<std::string> columns_;
  std::vector<std::vector<Cell>> rows_;
};

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_atomically(path, [&](std::ostream& os) { os << text; });
}

}  // namespace alignlab::io
