#include "nestedspde/table_io.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

namespace nspde {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

}  // namespace

const std::string* Table::findMeta(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return &v;
  return nullptr;
}

std::string format_double(double value) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return buf;
}

void save_table(const Table& table, const std::string& path) {
  if (table.columns.empty()) throw ConfigError("table has no columns");
  if (table.rows.size() != 0 &&
      table.rows.cols() != static_cast<Index>(table.columns.size()))
    throw ConfigError("table row width does not match the column names");

  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp);
    for (const auto& [k, v] : table.meta) out << "# " << k << ": " << v << "\n";
    for (std::size_t c = 0; c < table.columns.size(); ++c) {
      if (c) out << '\t';
      out << table.columns[c];
    }
    out << '\n';
    for (Index r = 0; r < table.rows.rows(); ++r) {
      for (Index c = 0; c < table.rows.cols(); ++c) {
        if (c) out << '\t';
        out << format_double(table.rows(r, c));
      }
      out << '\n';
    }
    out.flush();
    if (!out) throw DataError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw DataError("cannot rename " + tmp + " to " + path + ": " +
                    std::strerror(errno));
  }
}

Table load_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  Table table;
  std::string line;
  int lineno = 0;
  bool have_columns = false;
  std::vector<Vec> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::size_t start = line.find_first_not_of(" \t", 1);
      if (start == std::string::npos) continue;
      std::string body = line.substr(start);
      std::size_t colon = body.find(": ");
      if (colon == std::string::npos)
        table.meta.emplace_back(body, "");
      else
        table.meta.emplace_back(body.substr(0, colon), body.substr(colon + 2));
      continue;
    }
    auto cells = split_tabs(line);
    if (!have_columns) {
      table.columns = cells;
      have_columns = true;
      continue;
    }
    if (cells.size() != table.columns.size())
      throw DataError(path + " line " + std::to_string(lineno) + ": expected " +
                      std::to_string(table.columns.size()) + " fields, found " +
                      std::to_string(cells.size()));
    Vec row(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const char* s = cells[c].c_str();
      char* end = nullptr;
      errno = 0;
      double v = std::strtod(s, &end);
      if (end == s || *end != '\0' || errno == ERANGE)
        throw DataError(path + " line " + std::to_string(lineno) +
                        ": cannot parse '" + cells[c] + "' in column " +
                        table.columns[c]);
      row[c] = v;
    }
    rows.push_back(std::move(row));
  }
  if (!have_columns) throw DataError(path + ": no column header found");
  table.rows.resize(rows.size(), table.columns.size());
  for (std::size_t r = 0; r < rows.size(); ++r) table.rows.row(r) = rows[r];
  return table;
}

}  // namespace nspde
