#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace tailreg {

/// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

/// SHA-256 of a file's contents; throws DataError if unreadable.
std::string sha256_file(const std::filesystem::path& path);

/// Shortest decimal text that parses back to exactly the same double.
std::string format_double(double v);
double parse_double(std::string_view text);

std::string read_text_file(const std::filesystem::path& path);
/// Writes via a temporary sibling and renames, so readers never see partial files.
void write_text_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace tailreg
