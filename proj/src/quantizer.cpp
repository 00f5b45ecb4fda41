#include "tequila/quantizer.hpp"

#include <algorithm>
#include <cmath>

#include "tequila/error.hpp"

namespace tequila {

namespace {

void require_nonempty(std::span<const double> w) {
  if (w.empty()) throw Error(ErrorKind::InvalidShape, "empty weight array");
}

void require_weights(const WeightMatrix& w) {
  if (w.rows() == 0 || w.cols() == 0) {
    throw Error(ErrorKind::InvalidShape, "weight matrix must have rows >= 1 and cols >= 1");
  }
  if (!w.all_finite()) throw Error(ErrorKind::InvalidParam, "weight matrix has non-finite values");
}

double mean_abs(std::span<const double> w) {
  double sum = 0.0;
  for (double v : w) sum += std::fabs(v);
  return sum / static_cast<double>(w.size());
}

}  // namespace

std::string to_string(GranularityKind kind) {
  switch (kind) {
    case GranularityKind::PerTensor: return "per-tensor";
    case GranularityKind::PerChannel: return "per-channel";
    case GranularityKind::PerGroup: return "per-group";
  }
  return "unknown";
}

GranularityKind parse_granularity_kind(std::string_view name) {
  if (name == "per-tensor") return GranularityKind::PerTensor;
  if (name == "per-channel") return GranularityKind::PerChannel;
  if (name == "per-group") return GranularityKind::PerGroup;
  throw Error(ErrorKind::InvalidParam, "unknown granularity '" + std::string(name) + "'");
}

GroupLayout::GroupLayout(std::size_t rows, std::size_t cols, Granularity g)
    : rows_(rows), cols_(cols), granularity_(g) {
  if (rows == 0 || cols == 0) throw Error(ErrorKind::InvalidShape, "layout needs rows, cols >= 1");
  if (g.kind == GranularityKind::PerGroup) {
    if (g.group_size == 0) throw Error(ErrorKind::InvalidParam, "group_size must be >= 1");
    span_width_ = std::min(g.group_size, cols);
  } else {
    span_width_ = cols;
  }
  spans_per_row_ = (cols + span_width_ - 1) / span_width_;
}

std::size_t GroupLayout::num_groups() const noexcept {
  return granularity_.kind == GranularityKind::PerTensor ? 1 : rows_ * spans_per_row_;
}

std::size_t GroupLayout::span_end(std::size_t k) const noexcept {
  return std::min(cols_, (k + 1) * span_width_);
}

std::size_t GroupLayout::group_of_span(std::size_t row, std::size_t k) const noexcept {
  return granularity_.kind == GranularityKind::PerTensor ? 0 : row * spans_per_row_ + k;
}

std::size_t GroupLayout::group_offset(std::size_t g) const noexcept {
  if (granularity_.kind == GranularityKind::PerTensor) return 0;
  return (g / spans_per_row_) * cols_ + span_begin(g % spans_per_row_);
}

std::size_t GroupLayout::group_length(std::size_t g) const noexcept {
  if (granularity_.kind == GranularityKind::PerTensor) return rows_ * cols_;
  const std::size_t k = g % spans_per_row_;
  return span_end(k) - span_begin(k);
}

std::string to_string(BaseScheme scheme) {
  return scheme == BaseScheme::Absmean ? "absmean" : "twn";
}

BaseScheme parse_base_scheme(std::string_view name) {
  if (name == "absmean") return BaseScheme::Absmean;
  if (name == "twn") return BaseScheme::Twn;
  throw Error(ErrorKind::UnsupportedScheme, "'" + std::string(name) + "' is not absmean or twn");
}

ScaleThreshold absmean_params(std::span<const double> w) {
  require_nonempty(w);
  const double alpha = mean_abs(w);
  return {alpha, alpha / 2.0};
}

ScaleThreshold twn_params(std::span<const double> w) {
  require_nonempty(w);
  const double delta = 0.75 * mean_abs(w);
  double sum = 0.0;
  std::size_t count = 0;
  for (double v : w) {
    if (std::fabs(v) >= delta) {
      sum += std::fabs(v);
      ++count;
    }
  }
  const double alpha = count == 0 ? 0.0 : sum / static_cast<double>(count);
  return {alpha, delta};
}

ScaleThreshold scheme_params(BaseScheme scheme, std::span<const double> w) {
  return scheme == BaseScheme::Absmean ? absmean_params(w) : twn_params(w);
}

std::vector<std::int8_t> ternarize(std::span<const double> w, double delta) {
  if (!(delta >= 0.0)) throw Error(ErrorKind::InvalidThreshold, "threshold must be >= 0");
  std::vector<std::int8_t> codes(w.size());
  std::transform(w.begin(), w.end(), codes.begin(),
                 [delta](double v) { return ternarize_one(v, delta); });
  return codes;
}

QuantizedTensor quantize(const WeightMatrix& w, BaseScheme scheme, Granularity g) {
  require_weights(w);
  const GroupLayout layout(w.rows(), w.cols(), g);
  std::vector<double> alphas(layout.num_groups());
  std::vector<double> deltas(layout.num_groups());
  const std::span<const double> all(w.values());
  for (std::size_t grp = 0; grp < layout.num_groups(); ++grp) {
    const auto p = scheme_params(scheme, all.subspan(layout.group_offset(grp), layout.group_length(grp)));
    alphas[grp] = p.alpha;
    deltas[grp] = p.delta;
  }
  return quantize_with(w, g, alphas, deltas);
}

QuantizedTensor quantize_with(const WeightMatrix& w, Granularity g,
                              std::span<const double> alphas,
                              std::span<const double> deltas) {
  require_weights(w);
  const GroupLayout layout(w.rows(), w.cols(), g);
  if (alphas.size() != layout.num_groups() || deltas.size() != layout.num_groups()) {
    throw Error(ErrorKind::InvalidShape, "need one scale and threshold per group");
  }
  QuantizedTensor q;
  q.rows = w.rows();
  q.cols = w.cols();
  q.granularity = g;
  q.scales.assign(alphas.begin(), alphas.end());
  q.thresholds.assign(deltas.begin(), deltas.end());
  q.codes.resize(w.size());
  const std::span<const double> all(w.values());
  for (std::size_t grp = 0; grp < layout.num_groups(); ++grp) {
    if (!(deltas[grp] >= 0.0)) throw Error(ErrorKind::InvalidThreshold, "threshold must be >= 0");
    const std::size_t off = layout.group_offset(grp);
    const std::size_t len = layout.group_length(grp);
    if (alphas[grp] == 0.0) {
      std::fill_n(q.codes.begin() + static_cast<std::ptrdiff_t>(off), len, std::int8_t{0});
      continue;
    }
    for (std::size_t i = off; i < off + len; ++i) q.codes[i] = ternarize_one(all[i], deltas[grp]);
  }
  return q;
}

WeightMatrix dequantize(const QuantizedTensor& q) {
  const GroupLayout layout = q.layout();
  WeightMatrix out(q.rows, q.cols);
  for (std::size_t r = 0; r < q.rows; ++r) {
    for (std::size_t c = 0; c < q.cols; ++c) {
      out(r, c) = q.code(r, c) * q.scales[layout.group_of(r, c)];
    }
  }
  return out;
}

DeadzoneMask deadzone_mask(const WeightMatrix& w, const QuantizedTensor& q) {
  if (w.rows() != q.rows || w.cols() != q.cols) {
    throw Error(ErrorKind::InvalidShape, "weights and quantized tensor shapes differ");
  }
  const GroupLayout layout = q.layout();
  DeadzoneMask m{q.rows, q.cols, std::vector<std::uint8_t>(w.size(), 0),
                 std::vector<std::size_t>(q.rows, 0)};
  for (std::size_t r = 0; r < q.rows; ++r) {
    for (std::size_t k = 0; k < layout.spans_per_row(); ++k) {
      const double delta = q.thresholds[layout.group_of_span(r, k)];
      for (std::size_t c = layout.span_begin(k); c < layout.span_end(k); ++c) {
        if (std::fabs(w(r, c)) < delta) {
          m.mask[r * q.cols + c] = 1;
          ++m.count_per_row[r];
        }
      }
    }
  }
  return m;
}

BiasVector tequila_bias(const WeightMatrix& w, const DeadzoneMask& mask, double lambda) {
  if (w.rows() != mask.rows || w.cols() != mask.cols) {
    throw Error(ErrorKind::InvalidShape, "weights and mask shapes differ");
  }
  if (!std::isfinite(lambda)) throw Error(ErrorKind::InvalidParam, "lambda must be finite");
  BiasVector bias(w.rows(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < w.cols(); ++c) {
      if (mask.dead(r, c)) sum += w(r, c);
    }
    bias[r] = lambda * sum;
  }
  return bias;
}

}  // namespace tequila
