#pragma once

#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace spincav::text {

/// Shortest decimal form that round-trips to the same double, locale-free.
std::string format_double(double v);

/// Parses a full token as double ("nan"/"inf" accepted); throws
/// InputFormatError on trailing garbage.
double parse_double(std::string_view token);
long parse_long(std::string_view token);

std::vector<std::string_view> split_csv(std::string_view line);

/// Opens a file for reading; MissingFileError if it does not exist.
std::ifstream open_input(const std::string& path);
std::ofstream open_output(const std::string& path);

/// Reads the next non-empty line (trailing '\r' stripped). False at EOF.
bool next_line(std::istream& in, std::string& line);

}  // namespace spincav::text
