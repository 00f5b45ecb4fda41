#include "tequila/qat.hpp"

#include <algorithm>
#include <cmath>

#include "tequila/error.hpp"

namespace tequila {

namespace {

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Transposed (cols x rows) dense copy of f(r, c).
template <typename F>
std::vector<double> transposed(std::size_t rows, std::size_t cols, F&& f) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = f(r, c);
  }
  return t;
}

// sums[(b * K + k) * R + r] = sum over j in span k of wt[j][r] * x[b][j],
// accumulated in increasing j.
std::vector<double> span_sums(const Matrix& x, std::span<const double> wt, const GroupLayout& layout) {
  const std::size_t batch = x.rows();
  const std::size_t rows = layout.rows();
  const std::size_t spans = layout.spans_per_row();
  std::vector<double> sums(batch * spans * rows, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t k = 0; k < spans; ++k) {
      double* s = sums.data() + (b * spans + k) * rows;
      for (std::size_t j = layout.span_begin(k); j < layout.span_end(k); ++j) {
        const double xv = x(b, j);
        const double* w = wt.data() + j * rows;
        for (std::size_t r = 0; r < rows; ++r) s[r] += w[r] * xv;
      }
    }
  }
  return sums;
}

std::vector<double> code_transpose(const QuantizedTensor& q) {
  return transposed(q.rows, q.cols, [&](std::size_t r, std::size_t c) {
    return static_cast<double>(q.code(r, c));
  });
}

std::vector<double> mask_transpose(const DeadzoneMask& m) {
  return transposed(m.rows, m.cols, [&](std::size_t r, std::size_t c) {
    return m.dead(r, c) ? 1.0 : 0.0;
  });
}

// sum_b g[b][r] * x[b][j] for every (r, j), accumulated in increasing b.
Matrix outer_sums(const Matrix& g, const Matrix& x) {
  Matrix s(g.cols(), x.cols());
  for (std::size_t b = 0; b < g.rows(); ++b) {
    const auto xb = x.row(b);
    for (std::size_t r = 0; r < g.cols(); ++r) {
      const double gbr = g(b, r);
      auto sr = s.row(r);
      for (std::size_t j = 0; j < xb.size(); ++j) sr[j] += gbr * xb[j];
    }
  }
  return s;
}

std::vector<double> column_sums(const Matrix& g) {
  std::vector<double> out(g.cols(), 0.0);
  for (std::size_t b = 0; b < g.rows(); ++b) {
    for (std::size_t r = 0; r < g.cols(); ++r) out[r] += g(b, r);
  }
  return out;
}

void check_input(const Matrix& x, std::size_t cols) {
  if (x.cols() != cols) {
    throw Error(ErrorKind::InvalidShape, "input has " + std::to_string(x.cols()) +
                                             " features, layer expects " + std::to_string(cols));
  }
}

void check_grad(const Matrix& g, const ForwardCache& cache) {
  if (g.rows() != cache.input.rows() || g.cols() != cache.quantized.rows) {
    throw Error(ErrorKind::CacheError, "upstream gradient does not match the cached forward");
  }
}

// Applies per-group scale to STE sums: dead weights pass straight through.
Matrix ste_from_sums(const Matrix& sums, const ForwardCache& cache) {
  const auto& q = cache.quantized;
  const GroupLayout layout = q.layout();
  Matrix grad(q.rows, q.cols);
  for (std::size_t r = 0; r < q.rows; ++r) {
    for (std::size_t k = 0; k < layout.spans_per_row(); ++k) {
      const double alpha = q.scales[layout.group_of_span(r, k)];
      for (std::size_t c = layout.span_begin(k); c < layout.span_end(k); ++c) {
        grad(r, c) = cache.mask.dead(r, c) ? sums(r, c) : sums(r, c) * alpha;
      }
    }
  }
  return grad;
}

// sum_k alpha_k * s_k over the spans of each row.
Matrix combine_spans(const std::vector<double>& sums, const QuantizedTensor& q, std::size_t batch) {
  const GroupLayout layout = q.layout();
  const std::size_t spans = layout.spans_per_row();
  Matrix y(batch, q.rows);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t r = 0; r < q.rows; ++r) {
      double acc = 0.0;
      for (std::size_t k = 0; k < spans; ++k) {
        acc += q.scales[layout.group_of_span(r, k)] * sums[(b * spans + k) * q.rows + r];
      }
      y(b, r) = acc;
    }
  }
  return y;
}

}  // namespace

std::string to_string(Scheme scheme) {
  switch (scheme) {
    case Scheme::Absmean: return "absmean";
    case Scheme::Twn: return "twn";
    case Scheme::Lsq: return "lsq";
    case Scheme::Seq: return "seq";
    case Scheme::Dlt: return "dlt";
    case Scheme::Minima: return "minima";
    case Scheme::Tequila: return "tequila";
    case Scheme::TequilaNoMixed: return "tequila-no-mixed";
  }
  return "unknown";
}

const std::vector<Scheme>& all_schemes() {
  static const std::vector<Scheme> schemes{Scheme::Absmean, Scheme::Twn,     Scheme::Lsq,
                                           Scheme::Seq,     Scheme::Dlt,     Scheme::Minima,
                                           Scheme::Tequila, Scheme::TequilaNoMixed};
  return schemes;
}

Scheme parse_scheme(std::string_view name) {
  for (Scheme s : all_schemes()) {
    if (to_string(s) == name) return s;
  }
  throw Error(ErrorKind::UnsupportedScheme, "unknown scheme '" + std::string(name) + "'");
}

bool has_learnable_alpha(Scheme s) { return s == Scheme::Lsq || s == Scheme::Dlt; }
bool has_learnable_offset(Scheme s) { return s == Scheme::Dlt || s == Scheme::Seq; }

ForwardCache make_cache(const Matrix& x, const WeightMatrix& w, QuantizedTensor q) {
  ForwardCache cache;
  cache.input = x;
  cache.weights = w;
  cache.mask = deadzone_mask(w, q);
  cache.quantized = std::move(q);
  return cache;
}

Matrix forward_ternary(const Matrix& x, const QuantizedTensor& q) {
  check_input(x, q.cols);
  const GroupLayout layout = q.layout();
  return combine_spans(span_sums(x, code_transpose(q), layout), q, x.rows());
}

Matrix forward_minima(const Matrix& x, const ForwardCache& cache) {
  const auto& q = cache.quantized;
  Matrix y = forward_ternary(x, q);
  // Signed-minima term: sum over dead j of sign(x_j) sign(w_j), exact in doubles.
  const auto wt = transposed(q.rows, q.cols, [&](std::size_t r, std::size_t c) {
    return cache.mask.dead(r, c) ? sign_of(cache.weights(r, c)) : 0.0;
  });
  Matrix xs(x.rows(), x.cols());
  std::transform(x.values().begin(), x.values().end(), xs.values().begin(), sign_of);
  const GroupLayout whole(q.rows, q.cols, Granularity::per_channel());
  const auto counts = span_sums(xs, wt, whole);
  for (std::size_t b = 0; b < x.rows(); ++b) {
    for (std::size_t r = 0; r < q.rows; ++r) y(b, r) += cache.epsilon * counts[b * q.rows + r];
  }
  return y;
}

Matrix forward_tequila(const Matrix& x, const ForwardCache& cache) {
  Matrix y = forward_ternary(x, cache.quantized);
  if (!cache.bias || cache.bias->size() != cache.quantized.rows) {
    throw Error(ErrorKind::CacheError, "tequila forward needs a bias per output row");
  }
  for (std::size_t b = 0; b < y.rows(); ++b) {
    for (std::size_t r = 0; r < y.cols(); ++r) y(b, r) += (*cache.bias)[r];
  }
  return y;
}

Matrix forward_dlt(const Matrix& x, const ForwardCache& cache) {
  const auto& q = cache.quantized;
  check_input(x, q.cols);
  const GroupLayout layout = q.layout();
  if (cache.offsets.size() != layout.num_groups()) {
    throw Error(ErrorKind::InvalidShape, "dlt needs one offset per group");
  }
  const auto s1 = span_sums(x, code_transpose(q), layout);
  const auto ones = std::vector<double>(q.rows * q.cols, 1.0);
  const auto s2 = span_sums(x, ones, layout);
  const std::size_t spans = layout.spans_per_row();
  Matrix y(x.rows(), q.rows);
  for (std::size_t b = 0; b < x.rows(); ++b) {
    for (std::size_t r = 0; r < q.rows; ++r) {
      double acc = 0.0;
      for (std::size_t k = 0; k < spans; ++k) {
        const std::size_t grp = layout.group_of_span(r, k);
        const std::size_t i = (b * spans + k) * q.rows + r;
        acc += q.scales[grp] * s1[i] + cache.offsets[grp] * s2[i];
      }
      y(b, r) = acc;
    }
  }
  return y;
}

Matrix forward_seq(const Matrix& x, const ForwardCache& cache) {
  const auto& q = cache.quantized;
  check_input(x, q.cols);
  const GroupLayout layout = q.layout();
  if (cache.offsets.size() != layout.num_groups()) {
    throw Error(ErrorKind::InvalidShape, "seq needs one offset per group");
  }
  const auto s1 = span_sums(x, code_transpose(q), layout);
  const auto sd = span_sums(x, mask_transpose(cache.mask), layout);
  const std::size_t spans = layout.spans_per_row();
  Matrix y(x.rows(), q.rows);
  for (std::size_t b = 0; b < x.rows(); ++b) {
    for (std::size_t r = 0; r < q.rows; ++r) {
      double acc = 0.0;
      for (std::size_t k = 0; k < spans; ++k) {
        const std::size_t grp = layout.group_of_span(r, k);
        const std::size_t i = (b * spans + k) * q.rows + r;
        acc += q.scales[grp] * (s1[i] + cache.offsets[grp] * sd[i]);
      }
      y(b, r) = acc;
    }
  }
  return y;
}

Matrix backward_ste(const Matrix& g, const ForwardCache& cache) {
  check_grad(g, cache);
  return ste_from_sums(outer_sums(g, cache.input), cache);
}

Matrix backward_minima(const Matrix& g, const ForwardCache& cache) {
  check_grad(g, cache);
  Matrix grad = ste_from_sums(outer_sums(g, cache.input), cache);
  Matrix xs(cache.input.rows(), cache.input.cols());
  std::transform(cache.input.values().begin(), cache.input.values().end(), xs.values().begin(),
                 sign_of);
  const Matrix signed_sums = outer_sums(g, xs);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (cache.mask.mask[i]) grad.values()[i] = cache.epsilon * signed_sums.values()[i];
  }
  return grad;
}

Matrix backward_tequila(const Matrix& g, const ForwardCache& cache) {
  check_grad(g, cache);
  Matrix grad = ste_from_sums(outer_sums(g, cache.input), cache);
  const auto gsum = column_sums(g);
  for (std::size_t r = 0; r < grad.rows(); ++r) {
    for (std::size_t c = 0; c < grad.cols(); ++c) {
      if (cache.mask.dead(r, c)) grad(r, c) += cache.lambda * gsum[r];
    }
  }
  return grad;
}

Matrix backward_tequila_no_mixed(const Matrix& g, const ForwardCache& cache) {
  check_grad(g, cache);
  Matrix grad = ste_from_sums(outer_sums(g, cache.input), cache);
  const auto gsum = column_sums(g);
  for (std::size_t r = 0; r < grad.rows(); ++r) {
    for (std::size_t c = 0; c < grad.cols(); ++c) {
      if (cache.mask.dead(r, c)) grad(r, c) = cache.lambda * gsum[r];
    }
  }
  return grad;
}

LearnableGrads backward_learnable(const Matrix& g, const ForwardCache& cache, Scheme scheme) {
  if (scheme != Scheme::Lsq && scheme != Scheme::Dlt && scheme != Scheme::Seq) {
    throw Error(ErrorKind::UnsupportedScheme, to_string(scheme) + " has no learnable parameters");
  }
  check_grad(g, cache);
  const auto& q = cache.quantized;
  const GroupLayout layout = q.layout();
  const std::size_t spans = layout.spans_per_row();
  LearnableGrads out;
  out.grad_w = backward_ste(g, cache);

  auto accumulate = [&](const std::vector<double>& sums, std::vector<double>& target, bool scaled) {
    target.assign(layout.num_groups(), 0.0);
    for (std::size_t b = 0; b < g.rows(); ++b) {
      for (std::size_t r = 0; r < q.rows; ++r) {
        for (std::size_t k = 0; k < spans; ++k) {
          const std::size_t grp = layout.group_of_span(r, k);
          const double s = sums[(b * spans + k) * q.rows + r];
          target[grp] += g(b, r) * (scaled ? q.scales[grp] * s : s);
        }
      }
    }
  };

  if (has_learnable_alpha(scheme)) {
    accumulate(span_sums(cache.input, code_transpose(q), layout), out.grad_alpha, false);
  }
  if (scheme == Scheme::Dlt) {
    const std::vector<double> ones(q.rows * q.cols, 1.0);
    accumulate(span_sums(cache.input, ones, layout), out.grad_b, false);
  } else if (scheme == Scheme::Seq) {
    accumulate(span_sums(cache.input, mask_transpose(cache.mask), layout), out.grad_b, true);
  }
  return out;
}

Matrix backward_input(const Matrix& g, const ForwardCache& cache, Scheme scheme) {
  check_grad(g, cache);
  const auto& q = cache.quantized;
  const GroupLayout layout = q.layout();
  Matrix effective(q.rows, q.cols);
  for (std::size_t r = 0; r < q.rows; ++r) {
    for (std::size_t c = 0; c < q.cols; ++c) {
      const std::size_t grp = layout.group_of(r, c);
      const double alpha = q.scales[grp];
      double w = q.code(r, c) * alpha;
      if (scheme == Scheme::Dlt) {
        w += cache.offsets[grp];
      } else if (scheme == Scheme::Seq && cache.mask.dead(r, c)) {
        w = alpha * cache.offsets[grp];
      }
      effective(r, c) = w;
    }
  }
  Matrix gx(g.rows(), q.cols);
  for (std::size_t b = 0; b < g.rows(); ++b) {
    auto out = gx.row(b);
    for (std::size_t r = 0; r < q.rows; ++r) {
      const double gbr = g(b, r);
      const auto wr = effective.row(r);
      for (std::size_t c = 0; c < q.cols; ++c) out[c] += gbr * wr[c];
    }
  }
  return gx;
}

QuantLinearLayer::QuantLinearLayer(WeightMatrix weights, Scheme scheme, LayerOptions options)
    : weights_(std::move(weights)), scheme_(scheme), options_(options) {
  if (weights_.rows() == 0 || weights_.cols() == 0) {
    throw Error(ErrorKind::InvalidShape, "layer needs rows, cols >= 1");
  }
  if (!weights_.all_finite()) throw Error(ErrorKind::InvalidParam, "non-finite initial weights");
  const GroupLayout layout(rows(), cols(), options_.granularity);
  if (has_learnable_alpha(scheme_)) {
    const QuantizedTensor init = quantize(weights_, BaseScheme::Absmean, options_.granularity);
    alpha_ = init.scales;
    frozen_delta_ = init.thresholds;
  }
  if (has_learnable_offset(scheme_)) offsets_.assign(layout.num_groups(), 0.0);
}

void QuantLinearLayer::restore_state(std::vector<double> alpha, std::vector<double> frozen_delta,
                                     std::vector<double> offsets) {
  auto check = [](const std::vector<double>& got, const std::vector<double>& want, const char* what) {
    if (got.size() != want.size()) {
      throw Error(ErrorKind::InvalidShape, std::string(what) + " has " + std::to_string(got.size()) +
                                               " entries, layer keeps " + std::to_string(want.size()));
    }
  };
  check(alpha, alpha_, "alpha");
  check(frozen_delta, frozen_delta_, "delta");
  check(offsets, offsets_, "offsets");
  alpha_ = std::move(alpha);
  frozen_delta_ = std::move(frozen_delta);
  offsets_ = std::move(offsets);
  cache_.reset();
}

QuantizedTensor QuantLinearLayer::quantize_now() const {
  switch (scheme_) {
    case Scheme::Twn: return quantize(weights_, BaseScheme::Twn, options_.granularity);
    case Scheme::Lsq:
    case Scheme::Dlt: return quantize_with(weights_, options_.granularity, alpha_, frozen_delta_);
    default: return quantize(weights_, BaseScheme::Absmean, options_.granularity);
  }
}

Matrix QuantLinearLayer::forward(const Matrix& x) {
  check_input(x, cols());
  ForwardCache cache = make_cache(x, weights_, quantize_now());
  cache.lambda = options_.lambda;
  cache.epsilon = options_.epsilon;
  cache.offsets = offsets_;
  Matrix y;
  switch (scheme_) {
    case Scheme::Minima: y = forward_minima(x, cache); break;
    case Scheme::Tequila:
    case Scheme::TequilaNoMixed:
      cache.bias = tequila_bias(weights_, cache.mask, options_.lambda);
      y = forward_tequila(x, cache);
      break;
    case Scheme::Dlt: y = forward_dlt(x, cache); break;
    case Scheme::Seq: y = forward_seq(x, cache); break;
    default: y = forward_ternary(x, cache.quantized); break;
  }
  cache_ = std::move(cache);
  return y;
}

LayerGrads QuantLinearLayer::backward(const Matrix& g) {
  if (!cache_) throw Error(ErrorKind::CacheError, "backward called without a pending forward");
  const ForwardCache cache = std::move(*cache_);
  cache_.reset();
  LayerGrads out;
  switch (scheme_) {
    case Scheme::Minima: out.grad_w = backward_minima(g, cache); break;
    case Scheme::Tequila: out.grad_w = backward_tequila(g, cache); break;
    case Scheme::TequilaNoMixed: out.grad_w = backward_tequila_no_mixed(g, cache); break;
    case Scheme::Lsq:
    case Scheme::Dlt:
    case Scheme::Seq: {
      auto lg = backward_learnable(g, cache, scheme_);
      out.grad_w = std::move(lg.grad_w);
      out.grad_alpha = std::move(lg.grad_alpha);
      out.grad_b = std::move(lg.grad_b);
      break;
    }
    default: out.grad_w = backward_ste(g, cache); break;
  }
  out.grad_x = backward_input(g, cache, scheme_);
  return out;
}

void optimizer_step(std::span<double> params, std::span<const double> grads,
                    OptimizerState& state, const AdamConfig& config) {
  if (params.size() != grads.size()) {
    throw Error(ErrorKind::InvalidShape, "parameter and gradient sizes differ");
  }
  if (!std::all_of(grads.begin(), grads.end(), [](double v) { return std::isfinite(v); })) {
    throw Error(ErrorKind::GradientError, "non-finite gradient at step " +
                                              std::to_string(state.step + 1));
  }
  if (state.first_moment.empty()) {
    state.first_moment.assign(params.size(), 0.0);
    state.second_moment.assign(params.size(), 0.0);
  }
  if (state.first_moment.size() != params.size()) {
    throw Error(ErrorKind::InvalidShape, "optimizer state belongs to a different parameter");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = config.beta1 * m + (1.0 - config.beta1) * grads[i];
    v = config.beta2 * v + (1.0 - config.beta2) * grads[i] * grads[i];
    params[i] -= config.learning_rate * (m / c1) / (std::sqrt(v / c2) + config.eps);
  }
}

}  // namespace tequila
