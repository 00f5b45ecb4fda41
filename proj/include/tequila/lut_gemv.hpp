#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tequila/packer.hpp"
#include "tequila/quantizer.hpp"

namespace tequila {

/// Dot products of one three-element input segment with every canonical
/// pattern. Each entry is formed with at most two additions/subtractions.
template <typename T>
using SegmentLut = std::array<T, kPatternCount>;

template <typename T>
SegmentLut<T> build_lut(T a, T b, T c) {
  return {T(0), c,         b - c,     b,     b + c,     a - b - c, a - b,
          a - b + c, a - c, a,     a + c, a + b - c, a + b, a + b + c};
}

/// Counts scalar multiplications performed by an instrumented kernel.
struct MulCounter {
  std::uint64_t segment = 0;  // inside LUT accumulation
  std::uint64_t scale = 0;    // per (row, group) scale application
  std::uint64_t dense = 0;    // dense baseline multiply-adds

  std::uint64_t total() const noexcept { return segment + scale + dense; }
};

/// Multiplication-free GEMV over a packed layer. `x` must already be
/// zero-padded to the layer's padded column count.
std::vector<float> lut_gemv(const PackedLayer& layer, std::span<const float> x);
std::vector<float> lut_gemv(const PackedLayer& layer, std::span<const float> x, MulCounter& counter);
/// Same table-lookup path with 64-bit accumulation, for tight comparisons.
std::vector<double> lut_gemv_f64(const PackedLayer& layer, std::span<const double> x);

/// y = sum_g alpha_g * sum_{j in g} code * x_j + bias, computed with plain
/// multiplies in double precision. `x` has the unpadded column count.
std::vector<double> reference_gemv(const QuantizedTensor& q, const BiasVector& bias,
                                   std::span<const double> x);

/// Full-precision baseline on a dense row-major float matrix.
std::vector<float> dense_gemv(std::span<const float> weights, std::size_t rows, std::size_t cols,
                              std::span<const float> x, MulCounter* counter = nullptr);

struct BenchShape {
  std::size_t rows = 0;
  std::size_t cols = 0;
};

struct BenchEntry {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t group_size = 0;
  double median_ns_lut = 0.0;
  double median_ns_dense = 0.0;
  std::uint64_t lut_multiplies = 0;
  std::uint64_t lut_segment_multiplies = 0;
  std::uint64_t dense_multiplies = 0;
  double speedup = 0.0;  // dense / lut median time
};

struct BenchReport {
  std::uint64_t seed = 0;
  std::size_t repetitions = 0;
  std::vector<BenchEntry> entries;
};

BenchReport bench_gemv(std::span<const BenchShape> shapes, std::size_t repetitions,
                       std::size_t group_size = 128, std::uint64_t seed = 0);

nlohmann::json to_json(const BenchReport& report);
BenchReport bench_from_json(const nlohmann::json& j);

}  // namespace tequila
