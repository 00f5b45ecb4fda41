#include "tequila/io.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tequila/error.hpp"

namespace tequila {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

bool try_parse_double(std::string_view text, double& out) {
  const std::string t = trim(text);
  if (t.empty()) return false;
  const char* first = t.data();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, t.data() + t.size(), out);
  return ec == std::errc() && ptr == t.data() + t.size();
}

template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts not supported");
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(buf, sizeof(T));
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

double parse_double(std::string_view text) {
  double v = 0.0;
  if (!try_parse_double(text, v)) {
    throw Error(ErrorKind::FormatError, "not a number: '" + std::string(text) + "'");
  }
  return v;
}

std::vector<std::vector<std::string>> read_csv_rows(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out.flush()) throw Error(ErrorKind::IoError, "write failed for " + path.string());
}

void write_json_file(const nlohmann::json& j, const std::filesystem::path& path) {
  write_text_file(path, j.dump(2) + "\n");
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::FormatError, path.string() + ": " + e.what());
  }
}

Matrix read_matrix_csv(const std::filesystem::path& path) {
  auto rows = read_csv_rows(path);
  if (!rows.empty()) {
    double dummy = 0.0;
    const bool header = !rows.front().empty() && !try_parse_double(rows.front().front(), dummy);
    if (header) rows.erase(rows.begin());
  }
  if (rows.empty()) throw Error(ErrorKind::FormatError, path.string() + " holds no matrix rows");
  const std::size_t cols = rows.front().size();
  std::vector<double> values;
  values.reserve(rows.size() * cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != cols) {
      throw Error(ErrorKind::FormatError, path.string() + ": row " + std::to_string(r + 1) +
                                              " has " + std::to_string(rows[r].size()) +
                                              " cells, expected " + std::to_string(cols));
    }
    for (const auto& cell : rows[r]) {
      const double v = parse_double(cell);
      if (!std::isfinite(v)) throw Error(ErrorKind::FormatError, "non-finite value in " + path.string());
      values.push_back(v);
    }
  }
  return Matrix(rows.size(), cols, std::move(values));
}

void write_matrix_csv(const Matrix& m, const std::filesystem::path& path) {
  std::string text;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      if (c) text += ',';
      text += format_double(m(r, c));
    }
    text += '\n';
  }
  write_text_file(path, text);
}

Matrix read_matrix_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  std::uint64_t shape[2] = {0, 0};
  if (!in.read(reinterpret_cast<char*>(shape), sizeof(shape))) {
    throw Error(ErrorKind::FormatError, path.string() + ": truncated 16-byte shape header");
  }
  if (shape[0] == 0 || shape[1] == 0 || shape[0] > (1u << 28) / shape[1]) {
    throw Error(ErrorKind::FormatError, path.string() + ": implausible shape");
  }
  std::vector<double> values(shape[0] * shape[1]);
  if (!in.read(reinterpret_cast<char*>(values.data()),
               static_cast<std::streamsize>(values.size() * sizeof(double)))) {
    throw Error(ErrorKind::FormatError, path.string() + ": truncated matrix payload");
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw Error(ErrorKind::FormatError, "non-finite value in " + path.string());
  }
  return Matrix(shape[0], shape[1], std::move(values));
}

void write_matrix_binary(const Matrix& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  put_le<std::uint64_t>(out, m.rows());
  put_le<std::uint64_t>(out, m.cols());
  for (double v : m.values()) put_le(out, v);
  if (!out.flush()) throw Error(ErrorKind::IoError, "write failed for " + path.string());
}

Matrix read_matrix(const std::filesystem::path& path) {
  return path.extension() == ".bin" ? read_matrix_binary(path) : read_matrix_csv(path);
}

}  // namespace tequila
