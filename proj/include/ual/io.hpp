#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace ual::io {

/// Shortest decimal text that parses back to exactly `value`.
std::string format_double(double value);

/// Strict full-string parse; throws FormatError on trailing garbage.
double parse_double(std::string_view text);

/// Writes `contents` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::string read_file(const std::filesystem::path& path);

/// Hex-encoded SHA-256.
std::string sha256_hex(std::string_view data);

}  // namespace ual::io
