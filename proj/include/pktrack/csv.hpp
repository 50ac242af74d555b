// Minimal CSV plumbing for the persisted schemas. Files are plain
// comma-separated text with a single header line and no quoting. Reported
// line numbers count data rows from 1; the header is line 0.

#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "pktrack/error.hpp"

namespace pktrack::csv {

inline std::vector<std::string> split(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {
    std::string line;
    if (!std::getline(in_, line)) throw SchemaError("empty file: missing header");
    strip_cr(line);
    header_ = split(line);
    line_ = 0;
  }

  const std::vector<std::string>& header() const { return header_; }
  std::size_t line() const { return line_; }

  bool has_column(std::string_view name) const {
    for (const auto& h : header_)
      if (h == name) return true;
    return false;
  }

  /// Column indices for `names`; SchemaError lists every missing one.
  std::vector<std::size_t> require(const std::vector<std::string>& names) const {
    std::vector<std::size_t> idx;
    std::string missing;
    for (const auto& n : names) {
      std::size_t i = 0;
      while (i < header_.size() && header_[i] != n) ++i;
      if (i == header_.size()) {
        missing += missing.empty() ? n : ", " + n;
      } else {
        idx.push_back(i);
      }
    }
    if (!missing.empty()) throw SchemaError("missing columns: " + missing);
    return idx;
  }

  /// Next non-empty data row. Rows must match the header width.
  bool next(std::vector<std::string>& fields) {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_;
      strip_cr(line);
      if (line.empty()) continue;
      fields = split(line);
      if (fields.size() != header_.size())
        throw ParseError("expected " + std::to_string(header_.size()) + " fields, got " +
                             std::to_string(fields.size()),
                         line_);
      return true;
    }
    return false;
  }

 private:
  static void strip_cr(std::string& s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
  }

  std::istream& in_;
  std::vector<std::string> header_;
  std::size_t line_ = 0;
};

inline double to_double(const std::string& s, std::size_t line) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v))
    throw ParseError("not a number: '" + s + "'", line);
  return v;
}

inline long long to_int(const std::string& s, std::size_t line) {
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ParseError("not an integer: '" + s + "'", line);
  return v;
}

/// Fixed nine-decimal rendering used for every timestamp column.
inline std::string fixed9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9f", v);
  return buf;
}

/// Shortest text that parses back to the same double.
inline std::string exact(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, ptr);
}

/// Rounds a time to whole nanoseconds so it survives fixed9 round trips.
inline double quantize_ns(double t) { return std::round(t * 1e9) / 1e9; }

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return in;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  return out;
}

}  // namespace pktrack::csv
