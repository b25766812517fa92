#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace molfuse::util {

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

// Fixed-point with `digits` decimals, "-0.00" normalised to "0.00".
std::string format_fixed(double v, int digits);

std::string_view trim(std::string_view s);
std::vector<std::string_view> split_whitespace(std::string_view s);
std::vector<std::string_view> split_lines(std::string_view text);
std::vector<std::string> split(std::string_view s, char sep);

std::string sha256_hex(std::string_view data);

std::string read_file(const std::filesystem::path& path);
// Writes via a temporary sibling and rename, so readers never see a torn file.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace molfuse::util
