#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tequila/matrix.hpp"

namespace tequila {

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);
double parse_double(std::string_view text);

std::vector<std::vector<std::string>> read_csv_rows(const std::filesystem::path& path);

void write_text_file(const std::filesystem::path& path, std::string_view text);
void write_json_file(const nlohmann::json& j, const std::filesystem::path& path);
nlohmann::json read_json_file(const std::filesystem::path& path);

// Matrix files. CSV: one row per line, comma separated, optional header line
// of non-numeric cells. Binary: little-endian u64 rows, u64 cols, then
// rows*cols f64 values in row-major order.
Matrix read_matrix_csv(const std::filesystem::path& path);
void write_matrix_csv(const Matrix& m, const std::filesystem::path& path);
Matrix read_matrix_binary(const std::filesystem::path& path);
void write_matrix_binary(const Matrix& m, const std::filesystem::path& path);
/// Dispatches on extension: ".bin" is binary, anything else CSV.
Matrix read_matrix(const std::filesystem::path& path);

}  // namespace tequila
