#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace dabul::io {

// Delimited-text table with a header row. Fields are trimmed; blank lines and
// lines starting with '#' are skipped.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Column index by name; throws ParseError naming `source` if missing.
  std::size_t column(std::string_view name) const;
  bool has_column(std::string_view name) const;
  std::string source;
};

Table read_table(const std::filesystem::path& path);
Table parse_table(std::istream& in, const std::string& source);

std::vector<std::string> split_fields(std::string_view line, char delim = ',');
std::string_view trim(std::string_view s);

long parse_long(std::string_view s, const std::string& context);
double parse_double(std::string_view s, const std::string& context);

// Shortest representation that round-trips exactly.
std::string format_double(double x);

void write_text_file(const std::filesystem::path& path, const std::string& contents);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace dabul::io
