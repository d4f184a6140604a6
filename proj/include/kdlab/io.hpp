#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace kdlab::io {

// Writes to a uniquely named sibling temp file, flushes, then renames over
// `path`. A reader never observes a partially written target.
void atomic_write(const std::filesystem::path& path, const std::function<void(std::ostream&)>& writer);
void atomic_write(const std::filesystem::path& path, std::string_view contents);

// Shortest text that parses back to the identical double.
std::string format_double(double v);

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex_digest(std::uint64_t h, std::size_t chars = 12);

using CsvRow = std::vector<std::string>;

struct CsvTable {
  CsvRow header;
  std::vector<CsvRow> rows;

  std::size_t column(std::string_view name) const;
};

std::string csv_escape(std::string_view field);
std::string csv_line(const CsvRow& row);
std::string csv_text(const CsvTable& table);
CsvTable parse_csv(std::string_view text);
CsvTable read_csv(const std::filesystem::path& path);
std::string read_file(const std::filesystem::path& path);

}  // namespace kdlab::io
