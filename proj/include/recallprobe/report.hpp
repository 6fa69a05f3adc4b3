#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "recallprobe/io.hpp"

namespace rp {

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

// Tiny fixed-column CSV builder with stable number formatting.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> columns) : columns_(std::move(columns)) {}

  class Cell {
   public:
    Cell(int v) { std::snprintf(buf_, sizeof buf_, "%d", v); text_ = buf_; }
    Cell(long v) { std::snprintf(buf_, sizeof buf_, "%ld", v); text_ = buf_; }
    Cell(std::size_t v) { std::snprintf(buf_, sizeof buf_, "%zu", v); text_ = buf_; }
    Cell(double v) : text_(format_number(v)) {}
    Cell(const char* s) : text_(s) {}
    Cell(const std::string& s) : text_(s) {}
    const std::string& text() const { return text_; }

   private:
    char buf_[32] = {0};
    std::string text_;
  };

  void add_row(std::initializer_list<Cell> cells) {
    if (cells.size() != columns_.size())
      fail(errc::validation, "csv row width differs from the header");
    std::vector<std::string> row;
    for (const auto& c : cells) row.push_back(c.text());
    rows_.push_back(std::move(row));
  }

  std::string str() const {
    std::string out;
    for (std::size_t i = 0; i < columns_.size(); ++i) {
      if (i) out.push_back(',');
      out += csv_field(columns_[i]);
    }
    out.push_back('\n');
    for (const auto& row : rows_) {
      for (std::size_t i = 0; i < row.size(); ++i) {
        if (i) out.push_back(',');
        out += csv_field(row[i]);
      }
      out.push_back('\n');
    }
    return out;
  }

  void write(const std::string& path) const { atomic_write_file(path, str()); }

 private:
  std::vector<std::string> columns_;
  std::vector<std::vector<std::string>> rows_;
};

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(errc::io, "cannot create directory '" + dir + "': " + ec.message());
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
  atomic_write_file(path, j.dump(2) + "\n");
}

}  // namespace rp
