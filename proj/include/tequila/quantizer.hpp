#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tequila/matrix.hpp"

namespace tequila {

using WeightMatrix = Matrix;

enum class GranularityKind { PerTensor, PerChannel, PerGroup };

struct Granularity {
  GranularityKind kind = GranularityKind::PerGroup;
  std::size_t group_size = 128;

  static Granularity per_tensor() { return {GranularityKind::PerTensor, 0}; }
  static Granularity per_channel() { return {GranularityKind::PerChannel, 0}; }
  static Granularity per_group(std::size_t size) { return {GranularityKind::PerGroup, size}; }

  friend bool operator==(const Granularity&, const Granularity&) = default;
};

std::string to_string(GranularityKind kind);
GranularityKind parse_granularity_kind(std::string_view name);

/// Maps matrix elements onto quantization groups.
///
/// Every group occupies a contiguous run of the row-major value array. Inside
/// a row, columns are cut into spans of `span_width()` (the last one may be
/// short); each (row, span) pair belongs to exactly one group. Per-tensor
/// layouts have one span per row, all mapping to group 0.
class GroupLayout {
 public:
  GroupLayout(std::size_t rows, std::size_t cols, Granularity g);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  const Granularity& granularity() const noexcept { return granularity_; }

  std::size_t num_groups() const noexcept;
  std::size_t spans_per_row() const noexcept { return spans_per_row_; }
  std::size_t span_width() const noexcept { return span_width_; }
  std::size_t span_begin(std::size_t k) const noexcept { return k * span_width_; }
  std::size_t span_end(std::size_t k) const noexcept;

  std::size_t group_of_span(std::size_t row, std::size_t k) const noexcept;
  std::size_t group_of(std::size_t row, std::size_t col) const noexcept {
    return group_of_span(row, col / span_width_);
  }

  /// Offset and length of group `g` in the row-major value array.
  std::size_t group_offset(std::size_t g) const noexcept;
  std::size_t group_length(std::size_t g) const noexcept;

 private:
  std::size_t rows_;
  std::size_t cols_;
  Granularity granularity_;
  std::size_t span_width_;
  std::size_t spans_per_row_;
};

enum class BaseScheme { Absmean, Twn };

std::string to_string(BaseScheme scheme);
BaseScheme parse_base_scheme(std::string_view name);

struct ScaleThreshold {
  double alpha = 0.0;
  double delta = 0.0;
};

/// alpha = mean |w|, delta = alpha / 2.
ScaleThreshold absmean_params(std::span<const double> w);

/// delta = 0.75 mean |w|; alpha is the least-squares scale for the codes
/// that delta produces, i.e. the mean |w| over elements with |w| >= delta.
ScaleThreshold twn_params(std::span<const double> w);

ScaleThreshold scheme_params(BaseScheme scheme, std::span<const double> w);

/// Piecewise ternary map evaluated top-down: w >= delta -> +1,
/// |w| < delta -> 0, otherwise -1.
inline std::int8_t ternarize_one(double w, double delta) {
  if (w >= delta) return 1;
  if (w > -delta) return 0;
  return -1;
}

std::vector<std::int8_t> ternarize(std::span<const double> w, double delta);

struct QuantizedTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Granularity granularity;
  std::vector<std::int8_t> codes;
  std::vector<double> scales;
  std::vector<double> thresholds;

  GroupLayout layout() const { return GroupLayout(rows, cols, granularity); }
  std::int8_t code(std::size_t r, std::size_t c) const { return codes[r * cols + c]; }

  friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

QuantizedTensor quantize(const WeightMatrix& w, BaseScheme scheme, Granularity g);

/// Quantizes with caller-supplied per-group scales and thresholds, as needed
/// by schemes whose scale is learned. Groups with alpha == 0 get zero codes.
QuantizedTensor quantize_with(const WeightMatrix& w, Granularity g,
                              std::span<const double> alphas,
                              std::span<const double> deltas);

WeightMatrix dequantize(const QuantizedTensor& q);

struct DeadzoneMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> mask;
  std::vector<std::size_t> count_per_row;

  bool dead(std::size_t r, std::size_t c) const { return mask[r * cols + c] != 0; }
};

DeadzoneMask deadzone_mask(const WeightMatrix& w, const QuantizedTensor& q);

using BiasVector = std::vector<double>;

/// Per output row: lambda times the sum of that row's deadzone weights.
BiasVector tequila_bias(const WeightMatrix& w, const DeadzoneMask& mask, double lambda);

}  // namespace tequila
