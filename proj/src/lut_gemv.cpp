#include "tequila/lut_gemv.hpp"

#include <algorithm>
#include <chrono>
#include <random>

#include "tequila/error.hpp"

namespace tequila {

namespace {

// Scalar that tallies every multiplication it takes part in. Running the
// kernels on this type is how the multiply budget is measured: whatever
// counter `g_target` points at is bumped on each operator*.
thread_local std::uint64_t* g_target = nullptr;

struct Counted {
  double v = 0.0;
  Counted() = default;
  explicit Counted(double x) : v(x) {}
};

Counted operator+(Counted a, Counted b) { return Counted(a.v + b.v); }
Counted operator-(Counted a, Counted b) { return Counted(a.v - b.v); }
Counted operator-(Counted a) { return Counted(-a.v); }
Counted& operator+=(Counted& a, Counted b) {
  a.v += b.v;
  return a;
}
Counted operator*(Counted a, Counted b) {
  if (g_target) ++*g_target;
  return Counted(a.v * b.v);
}

template <typename T>
T from_double(double v) {
  return T(v);
}

// Group scale application; the counted instantiation books it separately.
struct ScaleScope {
  MulCounter* counter;
  std::uint64_t* saved;
  explicit ScaleScope(MulCounter* c) : counter(c), saved(g_target) {
    if (counter) g_target = &counter->scale;
  }
  ~ScaleScope() { g_target = saved; }
};

// A run of triple positions that belong to one scale group. Triples that
// straddle a group boundary are split into several parts.
struct Part {
  std::uint32_t triple;
  std::uint32_t span;
  std::uint8_t mask;  // which of the three positions this part covers
  bool closes_span;
};

std::vector<Part> make_plan(const GroupLayout& layout, std::size_t triples) {
  std::vector<Part> parts;
  const std::size_t last_span = layout.spans_per_row() - 1;
  for (std::size_t t = 0; t < triples; ++t) {
    for (std::size_t i = 0; i < 3; ++i) {
      const std::size_t c = 3 * t + i;
      const std::size_t k = c < layout.cols() ? c / layout.span_width() : last_span;
      if (parts.empty() || parts.back().triple != t || parts.back().span != k) {
        parts.push_back({static_cast<std::uint32_t>(t), static_cast<std::uint32_t>(k), 0, false});
      }
      parts.back().mask |= static_cast<std::uint8_t>(1u << i);
    }
  }
  for (std::size_t p = 0; p < parts.size(); ++p) {
    parts[p].closes_span = p + 1 == parts.size() || parts[p + 1].span != parts[p].span;
  }
  return parts;
}

template <typename T, typename In>
std::vector<T> lut_kernel(const PackedLayer& layer, std::span<const In> x, MulCounter* counter) {
  if (x.size() != layer.padded_cols()) {
    throw Error(ErrorKind::InvalidShape, "input length " + std::to_string(x.size()) +
                                             " != padded cols " + std::to_string(layer.padded_cols()));
  }
  const GroupLayout layout = layer.layout();
  const auto parts = make_plan(layout, layer.triples());

  std::uint64_t* const saved = g_target;
  if (counter) g_target = &counter->segment;

  // Segment tables, one per part, built from the masked input triple.
  std::vector<SegmentLut<T>> luts;
  luts.reserve(parts.size());
  const T zero = from_double<T>(0.0);
  for (const auto& part : parts) {
    const std::size_t c = 3 * part.triple;
    const T a = (part.mask & 1) ? from_double<T>(x[c]) : zero;
    const T b = (part.mask & 2) ? from_double<T>(x[c + 1]) : zero;
    const T d = (part.mask & 4) ? from_double<T>(x[c + 2]) : zero;
    luts.push_back(build_lut<T>(a, b, d));
  }

  std::vector<T> y(layer.rows, zero);
  for (std::size_t r = 0; r < layer.rows; ++r) {
    T acc = zero;
    T partial = zero;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const Part& part = parts[p];
      const T v = luts[p][layer.index_at(r, part.triple)];
      partial += layer.negated_at(r, part.triple) ? -v : v;
      if (part.closes_span) {
        const T scale = from_double<T>(layer.scales[layout.group_of_span(r, part.span)]);
        ScaleScope scope(counter);
        acc += scale * partial;
        partial = zero;
      }
    }
    acc += from_double<T>(layer.bias[r]);
    y[r] = acc;
  }
  g_target = saved;
  return y;
}

std::vector<float> narrow(const std::vector<Counted>& v) {
  std::vector<float> out(v.size());
  std::transform(v.begin(), v.end(), out.begin(), [](Counted c) { return static_cast<float>(c.v); });
  return out;
}

template <typename T>
std::vector<T> dense_kernel(std::span<const float> weights, std::size_t rows, std::size_t cols,
                            std::span<const float> x) {
  std::vector<T> y(rows, from_double<T>(0.0));
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = from_double<T>(0.0);
    const float* w = weights.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) acc += from_double<T>(w[c]) * from_double<T>(x[c]);
    y[r] = acc;
  }
  return y;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<float> lut_gemv(const PackedLayer& layer, std::span<const float> x) {
  return lut_kernel<float>(layer, x, nullptr);
}

std::vector<float> lut_gemv(const PackedLayer& layer, std::span<const float> x, MulCounter& counter) {
  return narrow(lut_kernel<Counted>(layer, x, &counter));
}

std::vector<double> lut_gemv_f64(const PackedLayer& layer, std::span<const double> x) {
  return lut_kernel<double>(layer, x, nullptr);
}

std::vector<double> reference_gemv(const QuantizedTensor& q, const BiasVector& bias,
                                   std::span<const double> x) {
  if (x.size() != q.cols || bias.size() != q.rows) {
    throw Error(ErrorKind::InvalidShape, "reference gemv: x must have cols entries, bias rows entries");
  }
  const GroupLayout layout = q.layout();
  std::vector<double> y(q.rows, 0.0);
  for (std::size_t r = 0; r < q.rows; ++r) {
    double acc = 0.0;
    for (std::size_t k = 0; k < layout.spans_per_row(); ++k) {
      double s = 0.0;
      for (std::size_t c = layout.span_begin(k); c < layout.span_end(k); ++c) {
        s += static_cast<double>(q.code(r, c)) * x[c];
      }
      acc += q.scales[layout.group_of_span(r, k)] * s;
    }
    y[r] = acc + bias[r];
  }
  return y;
}

std::vector<float> dense_gemv(std::span<const float> weights, std::size_t rows, std::size_t cols,
                              std::span<const float> x, MulCounter* counter) {
  if (weights.size() != rows * cols || x.size() != cols) {
    throw Error(ErrorKind::InvalidShape, "dense gemv shape mismatch");
  }
  if (!counter) return dense_kernel<float>(weights, rows, cols, x);
  std::uint64_t* const saved = g_target;
  g_target = &counter->dense;
  auto y = narrow(dense_kernel<Counted>(weights, rows, cols, x));
  g_target = saved;
  return y;
}

BenchReport bench_gemv(std::span<const BenchShape> shapes, std::size_t repetitions,
                       std::size_t group_size, std::uint64_t seed) {
  if (repetitions == 0) throw Error(ErrorKind::InvalidParam, "repetitions must be >= 1");
  BenchReport report;
  report.seed = seed;
  report.repetitions = repetitions;
  using Clock = std::chrono::steady_clock;
  volatile float sink = 0.0f;
  for (std::size_t s = 0; s < shapes.size(); ++s) {
    const auto [rows, cols] = shapes[s];
    std::mt19937_64 rng(seed + s);
    std::normal_distribution<double> normal(0.0, 0.02);
    WeightMatrix w(rows, cols);
    for (double& v : w.values()) v = normal(rng);
    const Granularity g = Granularity::per_group(group_size);
    const QuantizedTensor q = quantize(w, BaseScheme::Absmean, g);
    const auto mask = deadzone_mask(w, q);
    const PackedLayer layer = pack_layer(q, tequila_bias(w, mask, 1e-3), 1e-3);

    std::vector<float> dense(rows * cols);
    const WeightMatrix dq = dequantize(q);
    std::transform(dq.values().begin(), dq.values().end(), dense.begin(),
                   [](double v) { return static_cast<float>(v); });
    std::vector<float> x(layer.padded_cols(), 0.0f);
    std::normal_distribution<float> xin(0.0f, 1.0f);
    for (std::size_t c = 0; c < cols; ++c) x[c] = xin(rng);
    const std::span<const float> xs(x.data(), cols);

    BenchEntry e;
    e.rows = rows;
    e.cols = cols;
    e.group_size = layer.layout().span_width();
    MulCounter lut_count;
    lut_gemv(layer, x, lut_count);
    e.lut_multiplies = lut_count.total();
    e.lut_segment_multiplies = lut_count.segment;
    MulCounter dense_count;
    dense_gemv(dense, rows, cols, xs, &dense_count);
    e.dense_multiplies = dense_count.total();

    std::vector<double> t_lut, t_dense;
    for (std::size_t i = 0; i < repetitions; ++i) {
      auto t0 = Clock::now();
      sink = sink + lut_gemv(layer, x)[0];
      auto t1 = Clock::now();
      sink = sink + dense_gemv(dense, rows, cols, xs)[0];
      auto t2 = Clock::now();
      t_lut.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
      t_dense.push_back(std::chrono::duration<double, std::nano>(t2 - t1).count());
    }
    e.median_ns_lut = median(t_lut);
    e.median_ns_dense = median(t_dense);
    e.speedup = e.median_ns_lut > 0.0 ? e.median_ns_dense / e.median_ns_lut : 0.0;
    report.entries.push_back(e);
  }
  return report;
}

nlohmann::json to_json(const BenchReport& report) {
  nlohmann::json j;
  j["format"] = "tequila-bench";
  j["version"] = 1;
  j["seed"] = report.seed;
  j["repetitions"] = report.repetitions;
  auto& arr = j["entries"] = nlohmann::json::array();
  for (const auto& e : report.entries) {
    arr.push_back({{"rows", e.rows},
                   {"cols", e.cols},
                   {"group_size", e.group_size},
                   {"median_ns", {{"lut", e.median_ns_lut}, {"dense", e.median_ns_dense}}},
                   {"multiplies",
                    {{"lut", e.lut_multiplies},
                     {"lut_segment", e.lut_segment_multiplies},
                     {"dense", e.dense_multiplies}}},
                   {"speedup", e.speedup}});
  }
  return j;
}

BenchReport bench_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "tequila-bench") {
      throw Error(ErrorKind::FormatError, "not a bench report");
    }
    BenchReport r;
    r.seed = j.at("seed").get<std::uint64_t>();
    r.repetitions = j.at("repetitions").get<std::size_t>();
    for (const auto& e : j.at("entries")) {
      BenchEntry b;
      b.rows = e.at("rows").get<std::size_t>();
      b.cols = e.at("cols").get<std::size_t>();
      b.group_size = e.at("group_size").get<std::size_t>();
      b.median_ns_lut = e.at("median_ns").at("lut").get<double>();
      b.median_ns_dense = e.at("median_ns").at("dense").get<double>();
      b.lut_multiplies = e.at("multiplies").at("lut").get<std::uint64_t>();
      b.lut_segment_multiplies = e.at("multiplies").at("lut_segment").get<std::uint64_t>();
      b.dense_multiplies = e.at("multiplies").at("dense").get<std::uint64_t>();
      b.speedup = e.at("speedup").get<double>();
      r.entries.push_back(b);
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::FormatError, std::string("bench report: ") + e.what());
  }
}

}  // namespace tequila
