#include "tequila/error.hpp"

namespace tequila {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidShape: return "InvalidShape";
    case ErrorKind::InvalidThreshold: return "InvalidThreshold";
    case ErrorKind::UnsupportedScheme: return "UnsupportedScheme";
    case ErrorKind::CacheError: return "CacheError";
    case ErrorKind::GradientError: return "GradientError";
    case ErrorKind::InvalidParam: return "InvalidParam";
    case ErrorKind::InsufficientHistory: return "InsufficientHistory";
    case ErrorKind::DegenerateNormalization: return "DegenerateNormalization";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::InvalidCode: return "InvalidCode";
    case ErrorKind::Divergence: return "Divergence";
  }
  return "Unknown";
}

}  // namespace tequila
