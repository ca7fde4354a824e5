#pragma once

#include <filesystem>
#include <string>

namespace tamdp {

/// Throws LabError if the file cannot be read.
std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temp file and renames it over `path`, so readers
/// never see a partial file. Creates parent directories.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

/// Quotes a CSV field when it contains a comma, quote or newline.
std::string csv_field(const std::string& text);

/// %.17g, or an empty string for non-finite values.
std::string format_double(double x);

}  // namespace tamdp
