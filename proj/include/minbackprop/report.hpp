#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "minbackprop/error.hpp"

namespace minbackprop::report {

/// Numbers are written with 17 significant digits so they parse back to the
/// same double. Anything that does not parse as a number is text.
using Cell = std::variant<double, std::string>;

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (*first == '+') return false;
  const auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

inline std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string cell_text(const Cell& c) {
  if (const double* d = std::get_if<double>(&c)) return format_double(*d);
  return quote(std::get<std::string>(c));
}

inline bool same_cell(const Cell& a, const Cell& b) {
  if (a.index() != b.index()) return false;
  if (const double* x = std::get_if<double>(&a)) {
    const double y = std::get<double>(b);
    return (std::isnan(*x) && std::isnan(y)) || *x == y;
  }
  return std::get<std::string>(a) == std::get<std::string>(b);
}

/// Splits one CSV record, honouring double-quoted fields.
inline std::vector<std::string> split_record(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else {
      field += c;
    }
  }
  out.push_back(std::move(field));
  return out;
}

struct RunReport {
  std::vector<std::string> header;
  std::vector<std::vector<Cell>> rows;

  void add_row(std::vector<Cell> row) {
    require(row.size() == header.size(), ErrorCode::kDimensionMismatch,
            "row has " + std::to_string(row.size()) + " cells, header " + std::to_string(header.size()));
    rows.push_back(std::move(row));
  }

  size_t column(const std::string& name) const {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    fail(ErrorCode::kInvalidArgument, "no column named " + name);
  }

  double number(size_t row, const std::string& name) const {
    return std::get<double>(rows.at(row).at(column(name)));
  }

  std::string to_csv() const {
    std::ostringstream os;
    for (size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << quote(header[i]);
    os << "\n";
    for (const auto& row : rows) {
      for (size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << cell_text(row[i]);
      os << "\n";
    }
    return os.str();
  }

  static RunReport from_csv(const std::string& text) {
    RunReport rep;
    std::istringstream is(text);
    std::string line;
    bool first = true;
    while (std::getline(is, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      auto fields = split_record(line);
      if (first) {
        rep.header = std::move(fields);
        first = false;
        continue;
      }
      std::vector<Cell> row;
      row.reserve(fields.size());
      for (auto& f : fields) {
        double v = 0.0;
        if (parse_double(f, v)) {
          row.emplace_back(v);
        } else {
          row.emplace_back(std::move(f));
        }
      }
      rep.add_row(std::move(row));
    }
    return rep;
  }

  bool operator==(const RunReport& other) const {
    if (header != other.header || rows.size() != other.rows.size()) return false;
    for (size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != other.rows[r].size()) return false;
      for (size_t c = 0; c < rows[r].size(); ++c)
        if (!same_cell(rows[r][c], other.rows[r][c])) return false;
    }
    return true;
  }
};

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::kInvalidArgument, "cannot open " + path + " for writing");
  os << text;
  require(static_cast<bool>(os), ErrorCode::kInvalidArgument, "failed writing " + path);
}

inline std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorCode::kInvalidArgument, "cannot open " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

}  // namespace minbackprop::report
