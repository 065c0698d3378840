#pragma once

#include <string>
#include <utility>
#include <vector>

#include "nestedspde/types.hpp"

namespace nspde {

// Tab-delimited numeric table with a comment header. On disk:
//
//   # key: value          metadata lines, written in insertion order
//   name<TAB>name...      column names
//   1.5<TAB>-2e-3...      one row per line, %.17g
//
// The 17-significant-digit formatting makes write -> read -> write
// byte-stable for finite doubles.
struct Table {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::string> columns;
  Mat rows;

  // First metadata value for `key`, or nullptr.
  const std::string* findMeta(const std::string& key) const;
};

// Writes to a temporary file next to `path`, then renames over it, so readers
// never observe a partial table.
void save_table(const Table& table, const std::string& path);

// Throws DataError naming the offending line for malformed input.
Table load_table(const std::string& path);

// %.17g rendering used for every numeric cell.
std::string format_double(double value);

}  // namespace nspde
