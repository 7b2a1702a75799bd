#pragma once

// File plumbing: atomic writes, blob files, plain CSV.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "phase/blob.hpp"
#include "phase/errors.hpp"

namespace phase::io {

namespace fs = std::filesystem;

/// Writes through `fill` into a sibling temp file, then renames over `path`.
inline void atomic_write(const fs::path& path, const std::function<void(std::ostream&)>& fill) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".partial";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    fill(os);
    os.flush();
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline void atomic_write_text(const fs::path& path, const std::string& text) {
  atomic_write(path, [&](std::ostream& os) { os << text; });
}

/// Output directory built under a staging name and swapped in on commit().
/// Destruction without commit() removes the staging directory.
class StagedDir {
 public:
  explicit StagedDir(fs::path final) : final_(std::move(final)) {
    staging_ = final_;
    staging_ += ".partial";
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  StagedDir(const StagedDir&) = delete;
  StagedDir& operator=(const StagedDir&) = delete;
  ~StagedDir() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }

  const fs::path& path() const { return staging_; }
  fs::path operator/(const fs::path& rel) const { return staging_ / rel; }

  void commit() {
    fs::remove_all(final_);
    if (final_.has_parent_path()) fs::create_directories(final_.parent_path());
    fs::rename(staging_, final_);
    committed_ = true;
  }

 private:
  fs::path final_, staging_;
  bool committed_ = false;
};

inline std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Every blob stored back to back in one file.
inline std::vector<blob::Blob> read_blobs(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<blob::Blob> out;
  while (is.peek() != std::char_traits<char>::eof()) out.push_back(blob::read(is));
  return out;
}

inline blob::Blob read_blob(const fs::path& path) {
  auto v = read_blobs(path);
  if (v.size() != 1) throw FormatError(path.string() + ": expected one blob, found " + std::to_string(v.size()));
  return std::move(v.front());
}

inline void write_blob(const fs::path& path, const ad::Shape& shape, std::span<const double> values) {
  atomic_write(path, [&](std::ostream& os) { blob::write<double>(os, shape, values); });
}

// ---------------------------------------------------------------------------
// CSV

/// Shortest decimal form that parses back to the same double.
inline std::string fmt(double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline std::string fmt(long long x) { return std::to_string(x); }
inline std::string fmt(std::size_t x) { return std::to_string(x); }
inline std::string fmt(int x) { return std::to_string(x); }
inline std::string fmt(const std::string& s) { return s; }
inline std::string fmt(const char* s) { return s; }

class Csv {
 public:
  explicit Csv(std::vector<std::string> header) : width_(header.size()) { line(header); }

  template <class... Ts>
  void row(const Ts&... v) {
    if (sizeof...(Ts) != width_) throw DimensionError("csv row width mismatch");
    line({fmt(v)...});
  }
  void row_strings(const std::vector<std::string>& v) {
    if (v.size() != width_) throw DimensionError("csv row width mismatch");
    line(v);
  }

  const std::string& str() const { return text_; }
  void save(const fs::path& path) const { atomic_write_text(path, text_); }

 private:
  void line(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) text_ += ',';
      text_ += cells[i];
    }
    text_ += '\n';
  }
  std::size_t width_;
  std::string text_;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw FormatError("csv has no column '" + name + "'");
  }
  double number(std::size_t row, const std::string& col) const { return std::stod(rows.at(row).at(column(col))); }
};

inline CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream is(text);
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (first) {
      t.header = std::move(cells);
      first = false;
    } else {
      if (cells.size() != t.header.size()) throw FormatError("csv row width mismatch");
      t.rows.push_back(std::move(cells));
    }
  }
  return t;
}

}  // namespace phase::io
