#include "tequila/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tequila/error.hpp"

namespace tequila {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows * cols) {
    throw Error(ErrorKind::InvalidShape, "matrix " + std::to_string(rows) + "x" +
                                             std::to_string(cols) + " given " +
                                             std::to_string(values_.size()) + " values");
  }
}

bool Matrix::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace tequila
