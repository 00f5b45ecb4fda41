#include "tequila/packer.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "tequila/error.hpp"

namespace tequila {

namespace {

static_assert(std::endian::native == std::endian::little, "TQLA I/O assumes a little-endian host");

constexpr char kMagic[4] = {'T', 'Q', 'L', 'A'};

std::array<Triple, kPatternCount> make_patterns() {
  std::array<Triple, kPatternCount> table{};
  std::size_t n = 1;  // slot 0 stays the zero triple
  for (int a = -1; a <= 1; ++a) {
    for (int b = -1; b <= 1; ++b) {
      for (int c = -1; c <= 1; ++c) {
        const int first = a != 0 ? a : (b != 0 ? b : c);
        if (first == 1) {
          table[n++] = {static_cast<std::int8_t>(a), static_cast<std::int8_t>(b),
                        static_cast<std::int8_t>(c)};
        }
      }
    }
  }
  return table;
}

std::uint32_t kind_code(GranularityKind k) {
  switch (k) {
    case GranularityKind::PerTensor: return 0;
    case GranularityKind::PerChannel: return 1;
    case GranularityKind::PerGroup: return 2;
  }
  return 3;
}

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(std::span<const std::uint8_t> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }
  void put_floats(std::span<const float> f) {
    for (float v : f) put(v);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const noexcept { return pos_; }

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::vector<std::uint8_t> get_bytes(std::size_t n, const char* what) {
    need(n, what);
    std::vector<std::uint8_t> out(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }
  std::vector<float> get_floats(std::size_t n, const char* what) {
    need(n * sizeof(float), what);
    std::vector<float> out(n);
    std::memcpy(out.data(), bytes_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
    return out;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("truncated ") + what, pos_);
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const std::array<Triple, kPatternCount>& canonical_patterns() {
  static const auto table = make_patterns();
  return table;
}

TripleCode canonical_code(const Triple& triple) {
  for (auto v : triple) {
    if (v < -1 || v > 1) throw Error(ErrorKind::InvalidCode, "triple element outside {-1, 0, +1}");
  }
  const int first = triple[0] != 0 ? triple[0] : (triple[1] != 0 ? triple[1] : triple[2]);
  if (first == 0) return {0, 1};
  const auto s = static_cast<std::int8_t>(first);
  const Triple canon{static_cast<std::int8_t>(s * triple[0]), static_cast<std::int8_t>(s * triple[1]),
                     static_cast<std::int8_t>(s * triple[2])};
  const auto& table = canonical_patterns();
  for (std::size_t i = 1; i < kPatternCount; ++i) {
    if (table[i] == canon) return {static_cast<std::uint8_t>(i), s};
  }
  throw Error(ErrorKind::InvalidCode, "triple not in canonical table");
}

Triple decode(const TripleCode& code) {
  if (code.index >= kPatternCount) throw Error(ErrorKind::InvalidCode, "index >= 14");
  if (code.sign != 1 && code.sign != -1) throw Error(ErrorKind::InvalidCode, "sign must be +1 or -1");
  const Triple& p = canonical_patterns()[code.index];
  return {static_cast<std::int8_t>(code.sign * p[0]), static_cast<std::int8_t>(code.sign * p[1]),
          static_cast<std::int8_t>(code.sign * p[2])};
}

PackedLayer pack_layer(const QuantizedTensor& q, const BiasVector& bias, double lambda) {
  if (bias.size() != q.rows) throw Error(ErrorKind::InvalidShape, "bias length must equal rows");
  if (q.codes.size() != q.rows * q.cols || q.scales.size() != q.layout().num_groups()) {
    throw Error(ErrorKind::InvalidShape, "quantized tensor is internally inconsistent");
  }
  if (!std::isfinite(lambda)) throw Error(ErrorKind::InvalidParam, "lambda must be finite");
  PackedLayer layer;
  layer.rows = static_cast<std::uint32_t>(q.rows);
  layer.cols = static_cast<std::uint32_t>(q.cols);
  layer.granularity = q.granularity;
  layer.lambda = static_cast<float>(lambda);
  layer.indices.assign(layer.rows * layer.index_bytes_per_row(), 0);
  layer.signs.assign(layer.rows * layer.sign_bytes_per_row(), 0);
  for (std::size_t r = 0; r < q.rows; ++r) {
    for (std::size_t t = 0; t < layer.triples(); ++t) {
      Triple tr{0, 0, 0};
      for (std::size_t i = 0; i < 3; ++i) {
        const std::size_t c = 3 * t + i;
        if (c < q.cols) tr[i] = q.code(r, c);
      }
      const TripleCode code = canonical_code(tr);
      layer.indices[r * layer.index_bytes_per_row() + t / 2] |=
          static_cast<std::uint8_t>(code.index << ((t & 1) ? 4 : 0));
      if (code.sign < 0) {
        layer.signs[r * layer.sign_bytes_per_row() + t / 8] |= static_cast<std::uint8_t>(1u << (t % 8));
      }
    }
  }
  layer.scales.reserve(q.scales.size());
  for (double s : q.scales) layer.scales.push_back(static_cast<float>(s));
  layer.bias.reserve(bias.size());
  for (double b : bias) layer.bias.push_back(static_cast<float>(b));
  return layer;
}

PackedModel pack_model(std::span<const PackInput> layers, double lambda) {
  PackedModel model;
  for (const auto& in : layers) {
    const auto& q = in.quantized;
    if (in.weights.rows() != q.rows || in.weights.cols() != q.cols || in.mask.rows != q.rows ||
        in.mask.cols != q.cols) {
      throw Error(ErrorKind::InvalidShape, "layer weights, codes and mask shapes differ");
    }
    model.layers.push_back(pack_layer(q, tequila_bias(in.weights, in.mask, lambda), lambda));
  }
  return model;
}

QuantizedTensor unpack_codes(const PackedLayer& layer) {
  QuantizedTensor q;
  q.rows = layer.rows;
  q.cols = layer.cols;
  q.granularity = layer.granularity;
  q.codes.assign(q.rows * q.cols, 0);
  for (std::size_t r = 0; r < q.rows; ++r) {
    for (std::size_t t = 0; t < layer.triples(); ++t) {
      const Triple tr = decode({layer.index_at(r, t), static_cast<std::int8_t>(layer.negated_at(r, t) ? -1 : 1)});
      for (std::size_t i = 0; i < 3; ++i) {
        const std::size_t c = 3 * t + i;
        if (c < q.cols) q.codes[r * q.cols + c] = tr[i];
      }
    }
  }
  q.scales.assign(layer.scales.begin(), layer.scales.end());
  q.thresholds.assign(q.scales.size(), 0.0);
  return q;
}

std::vector<std::uint8_t> serialize_packed(const PackedModel& model) {
  Writer w;
  for (char c : kMagic) w.put(c);
  w.put<std::uint32_t>(model.version);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.layers.size()));
  for (const auto& layer : model.layers) {
    w.put<std::uint32_t>(layer.rows);
    w.put<std::uint32_t>(layer.cols);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(layer.padded_cols() - layer.cols));
    w.put<std::uint32_t>(kind_code(layer.granularity.kind));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(layer.granularity.group_size));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(layer.scales.size()));
    w.put<float>(layer.lambda);
    w.put_bytes(layer.indices);
    w.put_bytes(layer.signs);
    w.put_floats(layer.scales);
    w.put_floats(layer.bias);
  }
  return w.take();
}

PackedModel parse_packed(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  for (char c : kMagic) {
    const std::size_t at = in.offset();
    if (in.get<char>("magic") != c) throw FormatError("bad magic, expected TQLA", at);
  }
  PackedModel model;
  const std::size_t version_at = in.offset();
  model.version = in.get<std::uint32_t>("version");
  if (model.version != kPackedFormatVersion) {
    throw FormatError("unsupported version " + std::to_string(model.version), version_at);
  }
  const auto count = in.get<std::uint32_t>("layer count");
  for (std::uint32_t l = 0; l < count; ++l) {
    PackedLayer layer;
    const std::size_t header_at = in.offset();
    layer.rows = in.get<std::uint32_t>("rows");
    layer.cols = in.get<std::uint32_t>("cols");
    const auto pad = in.get<std::uint32_t>("padding");
    const std::size_t kind_at = in.offset();
    const auto kind = in.get<std::uint32_t>("granularity");
    const auto group_size = in.get<std::uint32_t>("group size");
    const std::size_t scale_count_at = in.offset();
    const auto scale_count = in.get<std::uint32_t>("scale count");
    layer.lambda = in.get<float>("lambda");

    if (layer.rows == 0 || layer.cols == 0) throw FormatError("layer with zero rows or cols", header_at);
    if (pad != layer.padded_cols() - layer.cols) throw FormatError("padding disagrees with cols", header_at);
    switch (kind) {
      case 0: layer.granularity = Granularity::per_tensor(); break;
      case 1: layer.granularity = Granularity::per_channel(); break;
      case 2:
        if (group_size == 0) throw FormatError("per-group layer with group size 0", kind_at);
        layer.granularity = Granularity::per_group(group_size);
        break;
      default: throw FormatError("unknown granularity " + std::to_string(kind), kind_at);
    }
    if (scale_count != layer.layout().num_groups()) {
      throw FormatError("scale count disagrees with granularity", scale_count_at);
    }

    const std::size_t indices_at = in.offset();
    layer.indices = in.get_bytes(layer.rows * layer.index_bytes_per_row(), "index block");
    const std::size_t signs_at = in.offset();
    layer.signs = in.get_bytes(layer.rows * layer.sign_bytes_per_row(), "sign block");
    layer.scales = in.get_floats(scale_count, "scales");
    layer.bias = in.get_floats(layer.rows, "bias");

    const std::size_t triples = layer.triples();
    for (std::size_t r = 0; r < layer.rows; ++r) {
      for (std::size_t t = 0; t < triples; ++t) {
        const std::size_t byte_at = indices_at + r * layer.index_bytes_per_row() + t / 2;
        const std::uint8_t idx = layer.index_at(r, t);
        if (idx >= kPatternCount) throw FormatError("index " + std::to_string(idx) + " >= 14", byte_at);
        if (idx == 0 && layer.negated_at(r, t)) {
          throw FormatError("zero pattern with negative sign", signs_at + r * layer.sign_bytes_per_row() + t / 8);
        }
        // Padding columns must decode to zero.
        if (3 * t + 3 > layer.cols) {
          const Triple tr = canonical_patterns()[idx];
          for (std::size_t i = layer.cols - 3 * t; i < 3; ++i) {
            if (tr[i] != 0) throw FormatError("nonzero code in padding column", byte_at);
          }
        }
      }
      if (triples % 2 == 1 && (layer.indices[(r + 1) * layer.index_bytes_per_row() - 1] >> 4) != 0) {
        throw FormatError("nonzero unused index nibble", indices_at + (r + 1) * layer.index_bytes_per_row() - 1);
      }
      if (triples % 8 != 0 &&
          (layer.signs[(r + 1) * layer.sign_bytes_per_row() - 1] >> (triples % 8)) != 0) {
        throw FormatError("nonzero unused sign bits", signs_at + (r + 1) * layer.sign_bytes_per_row() - 1);
      }
    }
    model.layers.push_back(std::move(layer));
  }
  if (in.offset() != bytes.size()) throw FormatError("trailing bytes after last layer", in.offset());
  return model;
}

void write_packed(const PackedModel& model, const std::filesystem::path& path) {
  const auto bytes = serialize_packed(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out.flush()) throw Error(ErrorKind::IoError, "write failed for " + path.string());
}

PackedModel read_packed(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return parse_packed(bytes);
}

}  // namespace tequila
