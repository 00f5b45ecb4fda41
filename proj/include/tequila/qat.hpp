#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tequila/matrix.hpp"
#include "tequila/quantizer.hpp"

namespace tequila {

/// Weight quantization schemes available to a QAT layer. TequilaNoMixed is
/// the ablation variant whose dead weights learn only through the bias path.
enum class Scheme { Absmean, Twn, Lsq, Seq, Dlt, Minima, Tequila, TequilaNoMixed };

std::string to_string(Scheme scheme);
Scheme parse_scheme(std::string_view name);
const std::vector<Scheme>& all_schemes();

bool has_learnable_alpha(Scheme s);
bool has_learnable_offset(Scheme s);

inline constexpr double kDefaultLambda = 1e-3;
inline constexpr double kDefaultEpsilon = 1e-3;
inline constexpr double kDefaultLearningRate = 1e-4;

/// Everything a backward pass needs from the matching forward. `offsets` is
/// the per-group b of DLT and SEQ; `lambda`/`epsilon` are copied so a cache
/// stays valid after the layer's hyperparameters change.
struct ForwardCache {
  Matrix input;
  Matrix weights;
  QuantizedTensor quantized;
  DeadzoneMask mask;
  std::optional<BiasVector> bias;
  std::vector<double> offsets;
  double lambda = 0.0;
  double epsilon = 0.0;
};

ForwardCache make_cache(const Matrix& x, const WeightMatrix& w, QuantizedTensor q);

// Forward kernels. All compute y (batch x rows) from x (batch x cols).
Matrix forward_ternary(const Matrix& x, const QuantizedTensor& q);
Matrix forward_minima(const Matrix& x, const ForwardCache& cache);
Matrix forward_tequila(const Matrix& x, const ForwardCache& cache);
Matrix forward_dlt(const Matrix& x, const ForwardCache& cache);
Matrix forward_seq(const Matrix& x, const ForwardCache& cache);

// Weight-gradient kernels. `g` is dL/dY (batch x rows).
Matrix backward_ste(const Matrix& g, const ForwardCache& cache);
Matrix backward_minima(const Matrix& g, const ForwardCache& cache);
Matrix backward_tequila(const Matrix& g, const ForwardCache& cache);
Matrix backward_tequila_no_mixed(const Matrix& g, const ForwardCache& cache);

struct LearnableGrads {
  Matrix grad_w;
  std::vector<double> grad_alpha;  // empty unless the scheme learns alpha
  std::vector<double> grad_b;      // empty unless the scheme learns b
};

/// Gradients for LSQ, DLT and SEQ. Codes and mask are held constant when
/// differentiating with respect to alpha and b; weights use the STE.
LearnableGrads backward_learnable(const Matrix& g, const ForwardCache& cache, Scheme scheme);

/// dL/dX for the given scheme: g times the weights the input actually saw.
Matrix backward_input(const Matrix& g, const ForwardCache& cache, Scheme scheme);

struct LayerGrads {
  Matrix grad_w;
  std::vector<double> grad_alpha;
  std::vector<double> grad_b;
  Matrix grad_x;
};

struct LayerOptions {
  Granularity granularity = Granularity::per_group(128);
  double lambda = kDefaultLambda;
  double epsilon = kDefaultEpsilon;
};

/// Linear layer trained with quantization in the loop. Holds full-precision
/// shadow weights; codes, masks and biases are rebuilt from them on every
/// forward.
class QuantLinearLayer {
 public:
  QuantLinearLayer(WeightMatrix weights, Scheme scheme, LayerOptions options = {});

  std::size_t rows() const noexcept { return weights_.rows(); }
  std::size_t cols() const noexcept { return weights_.cols(); }
  Scheme scheme() const noexcept { return scheme_; }
  const LayerOptions& options() const noexcept { return options_; }

  WeightMatrix& shadow_weights() noexcept { return weights_; }
  const WeightMatrix& shadow_weights() const noexcept { return weights_; }
  std::vector<double>& learnable_alpha() noexcept { return alpha_; }
  const std::vector<double>& learnable_alpha() const noexcept { return alpha_; }
  std::vector<double>& learnable_b() noexcept { return offsets_; }
  const std::vector<double>& learnable_b() const noexcept { return offsets_; }
  const std::vector<double>& frozen_delta() const noexcept { return frozen_delta_; }

  /// Reinstates learned state saved from an earlier run. Sizes must match
  /// what the scheme keeps; empty vectors are accepted for unused parts.
  void restore_state(std::vector<double> alpha, std::vector<double> frozen_delta,
                     std::vector<double> offsets);

  void set_lambda(double lambda) { options_.lambda = lambda; }
  void set_epsilon(double epsilon) { options_.epsilon = epsilon; }

  /// Quantization of the current shadow weights as this scheme sees it.
  QuantizedTensor quantize_now() const;

  Matrix forward(const Matrix& x);
  /// Consumes the cache left by the last forward; a second call throws CacheError.
  LayerGrads backward(const Matrix& g);

  bool has_pending_cache() const noexcept { return cache_.has_value(); }
  /// Drops the pending cache of an inference-only forward.
  void discard_cache() noexcept { cache_.reset(); }
  const std::optional<ForwardCache>& cache() const noexcept { return cache_; }

 private:
  WeightMatrix weights_;
  Scheme scheme_;
  LayerOptions options_;
  std::vector<double> alpha_;
  std::vector<double> offsets_;
  std::vector<double> frozen_delta_;
  std::optional<ForwardCache> cache_;
};

struct AdamConfig {
  double learning_rate = kDefaultLearningRate;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment accumulators for one parameter tensor.
struct OptimizerState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::uint64_t step = 0;
};

/// One Adam update with bias correction. Throws GradientError, leaving
/// params and state untouched, if any gradient is non-finite.
void optimizer_step(std::span<double> params, std::span<const double> grads,
                    OptimizerState& state, const AdamConfig& config = {});

}  // namespace tequila
