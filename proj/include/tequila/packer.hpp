#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "tequila/quantizer.hpp"

namespace tequila {

using Triple = std::array<std::int8_t, 3>;

inline constexpr std::size_t kPatternCount = 14;
inline constexpr std::uint32_t kPackedFormatVersion = 1;

/// 4-bit index into the canonical pattern table plus the sign that maps the
/// canonical pattern back onto the original triple.
struct TripleCode {
  std::uint8_t index = 0;
  std::int8_t sign = 1;

  friend bool operator==(const TripleCode&, const TripleCode&) = default;
};

/// The zero triple followed by the 13 triples whose first nonzero entry is
/// +1, in lexicographic order with -1 < 0 < +1.
const std::array<Triple, kPatternCount>& canonical_patterns();

TripleCode canonical_code(const Triple& triple);
Triple decode(const TripleCode& code);

/// One layer in deployment form. Columns are zero-padded up to a multiple
/// of three; every row's index nibbles and sign bits start on a byte
/// boundary (low nibble / low bit first).
struct PackedLayer {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  Granularity granularity;
  std::vector<std::uint8_t> indices;
  std::vector<std::uint8_t> signs;  // bit set means the triple is negated
  std::vector<float> scales;
  std::vector<float> bias;
  float lambda = 0.0f;

  std::size_t padded_cols() const noexcept { return triples() * 3; }
  std::size_t triples() const noexcept { return (cols + 2) / 3; }
  std::size_t index_bytes_per_row() const noexcept { return (triples() + 1) / 2; }
  std::size_t sign_bytes_per_row() const noexcept { return (triples() + 7) / 8; }

  std::uint8_t index_at(std::size_t r, std::size_t t) const noexcept {
    const std::uint8_t byte = indices[r * index_bytes_per_row() + t / 2];
    return (t & 1) ? byte >> 4 : byte & 0x0F;
  }
  bool negated_at(std::size_t r, std::size_t t) const noexcept {
    return (signs[r * sign_bytes_per_row() + t / 8] >> (t % 8)) & 1;
  }

  GroupLayout layout() const { return GroupLayout(rows, cols, granularity); }

  friend bool operator==(const PackedLayer&, const PackedLayer&) = default;
};

struct PackedModel {
  std::uint32_t version = kPackedFormatVersion;
  std::vector<PackedLayer> layers;

  friend bool operator==(const PackedModel&, const PackedModel&) = default;
};

struct PackInput {
  QuantizedTensor quantized;
  WeightMatrix weights;
  DeadzoneMask mask;
};

PackedLayer pack_layer(const QuantizedTensor& q, const BiasVector& bias, double lambda);

/// Packs codes and scales and freezes each layer's bias from its final
/// shadow weights.
PackedModel pack_model(std::span<const PackInput> layers, double lambda);

/// Codes and scales back in QuantizedTensor form (thresholds are not
/// carried by the format and come back as zero).
QuantizedTensor unpack_codes(const PackedLayer& layer);

std::vector<std::uint8_t> serialize_packed(const PackedModel& model);
PackedModel parse_packed(std::span<const std::uint8_t> bytes);

void write_packed(const PackedModel& model, const std::filesystem::path& path);
PackedModel read_packed(const std::filesystem::path& path);

}  // namespace tequila
