#pragma once

#include <stdexcept>
#include <string>

namespace tequila {

enum class ErrorKind {
  InvalidShape,
  InvalidThreshold,
  UnsupportedScheme,
  CacheError,
  GradientError,
  InvalidParam,
  InsufficientHistory,
  DegenerateNormalization,
  IoError,
  FormatError,
  InvalidCode,
  Divergence,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Reading a TQLA file reports where validation failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(ErrorKind::FormatError, what + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace tequila
