// Acceptance checks. `tequila_acceptance N` runs criterion N and prints one
// PASS/FAIL line for it (detail lines above it are indented). Exit status is
// 0 on pass. `tequila_acceptance experiments --data F` runs the training
// experiments shared by criteria 7 to 9 and stores them in F.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "oracles.hpp"
#include "tequila/diagnostics.hpp"
#include "tequila/error.hpp"
#include "tequila/experiments.hpp"
#include "tequila/io.hpp"
#include "tequila/lut_gemv.hpp"
#include "tequila/packer.hpp"
#include "tequila/qat.hpp"
#include "tequila/quantizer.hpp"
#include "tequila/train.hpp"

using namespace tequila;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back(std::string(ok ? "ok    " : "FAILED") + "  " + what);
  }
  void info(const std::string& what) { notes.push_back("      " + what); }
};

std::string fmt(double v, int digits = 6) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

std::vector<int> as_ints(const std::vector<std::int8_t>& v) { return {v.begin(), v.end()}; }

// 1 -------------------------------------------------------------------------

Outcome quantizer_suite() {
  Outcome out;
  std::mt19937_64 rng(1001);
  std::uniform_int_distribution<std::size_t> dim(1, 16);
  const char* kinds[] = {"per-tensor", "per-channel", "per-group"};
  for (int kind = 0; kind < 3; ++kind) {
    for (bool twn : {false, true}) {
      std::size_t mismatches = 0;
      const int n = 1000;
      for (int t = 0; t < n; ++t) {
        const WeightMatrix w = oracle::random_weights(dim(rng), dim(rng), rng);
        const Granularity g = kind == 0   ? Granularity::per_tensor()
                              : kind == 1 ? Granularity::per_channel()
                                          : Granularity::per_group(std::uniform_int_distribution<std::size_t>(1, w.cols() + 3)(rng));
        const auto got = quantize(w, twn ? BaseScheme::Twn : BaseScheme::Absmean, g);
        const auto want = oracle::quantize(w, twn, g);
        if (as_ints(got.codes) != want.codes || got.scales != want.scales || got.thresholds != want.thresholds) {
          ++mismatches;
        }
      }
      out.require(mismatches == 0, std::string(twn ? "twn" : "absmean") + " " + kinds[kind] + ": " +
                                       std::to_string(n - mismatches) + "/" + std::to_string(n) + " exact");
    }
  }

  double worst = 0.0;
  int checked = 0;
  std::uniform_int_distribution<std::size_t> len(1, 64);
  while (checked < 300) {
    const auto w = oracle::random_weights(1, len(rng), rng).values();
    const auto p = twn_params(w);
    if (p.alpha == 0.0) continue;
    std::vector<int> codes;
    for (double v : w) codes.push_back(oracle::ternary(v, p.delta));
    worst = std::max(worst, oracle::rel_err(p.alpha, oracle::grid_alpha(w, codes)));
    ++checked;
  }
  out.require(worst <= 1e-6, "twn alpha vs grid optimum on 300 groups: worst rel " + fmt(worst));
  return out;
}

// 2, 3 ----------------------------------------------------------------------

struct Instance {
  Matrix x;
  WeightMatrix w;
  Granularity g;
  QuantizedTensor q;
  oracle::Quantized oq;
  Matrix gy;
};

Instance random_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> dim(1, 12);
  Instance in;
  const std::size_t rows = dim(rng), cols = dim(rng), batch = dim(rng);
  in.w = oracle::random_weights(rows, cols, rng);
  in.x = oracle::random_matrix(batch, cols, rng);
  in.gy = oracle::random_matrix(batch, rows, rng);
  in.g = oracle::random_granularity(cols, rng);
  in.q = quantize(in.w, BaseScheme::Absmean, in.g);
  in.oq = oracle::quantize(in.w, false, in.g);
  return in;
}

double dot(const Matrix& a, const Matrix& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.values()[i] * b.values()[i];
  return s;
}

Outcome backward_conformance() {
  Outcome out;
  std::mt19937_64 rng(2002);
  const int n = 500;
  double ste = 0, minima = 0, teq = 0, lsq_a = 0, lsq_w = 0, dlt_a = 0, dlt_b = 0, seq_b = 0;
  for (int t = 0; t < n; ++t) {
    const Instance in = random_instance(rng);
    ForwardCache c = make_cache(in.x, in.w, in.q);
    c.lambda = 1e-3;
    c.epsilon = 1e-3;
    ste = std::max(ste, oracle::max_rel(backward_ste(in.gy, c).values(),
                                        oracle::backward_ste(in.gy, in.x, in.w, in.oq, in.g).values()));
    minima = std::max(minima, oracle::max_rel(backward_minima(in.gy, c).values(),
                                              oracle::backward_minima(in.gy, in.x, in.w, in.oq, in.g, 1e-3).values()));
    // Mixed gradients add two sums that can cancel; tiny results are
    // compared against a 1e-9 floor.
    teq = std::max(teq, oracle::max_rel(backward_tequila(in.gy, c).values(),
                                        oracle::backward_tequila(in.gy, in.x, in.w, in.oq, in.g, 1e-3).values(), 1e-9));
    std::normal_distribution<double> normal(0.0, 0.1);
    c.offsets.resize(in.q.scales.size());
    for (double& b : c.offsets) b = normal(rng);
    const auto want_alpha = oracle::grad_alpha(in.gy, in.x, in.w, in.oq, in.g);
    const auto lsq = backward_learnable(in.gy, c, Scheme::Lsq);
    lsq_a = std::max(lsq_a, oracle::max_rel(lsq.grad_alpha, want_alpha));
    lsq_w = std::max(lsq_w, oracle::max_rel(lsq.grad_w.values(), oracle::backward_ste(in.gy, in.x, in.w, in.oq, in.g).values()));
    const auto dlt = backward_learnable(in.gy, c, Scheme::Dlt);
    dlt_a = std::max(dlt_a, oracle::max_rel(dlt.grad_alpha, want_alpha));
    dlt_b = std::max(dlt_b, oracle::max_rel(dlt.grad_b, oracle::grad_b(in.gy, in.x, in.w, in.oq, in.g, false)));
    const auto seq = backward_learnable(in.gy, c, Scheme::Seq);
    seq_b = std::max(seq_b, oracle::max_rel(seq.grad_b, oracle::grad_b(in.gy, in.x, in.w, in.oq, in.g, true)));
  }
  const std::string suffix = " over " + std::to_string(n) + " instances";
  out.require(ste <= 1e-6, "backward_ste worst rel " + fmt(ste) + suffix);
  out.require(minima <= 1e-6, "backward_minima worst rel " + fmt(minima) + suffix);
  out.require(teq <= 1e-6, "backward_tequila worst rel " + fmt(teq) + suffix);
  out.require(std::max({lsq_a, lsq_w, dlt_a, dlt_b, seq_b}) <= 1e-6,
              "backward_learnable worst rel lsq " + fmt(std::max(lsq_a, lsq_w)) + ", dlt " +
                  fmt(std::max(dlt_a, dlt_b)) + ", seq " + fmt(seq_b) + suffix);

  // Central differences. Everything differentiated here is linear in the
  // perturbed parameter, so the step only affects rounding.
  const double h = 1e-4;
  double fd_bias = 0, fd_alpha = 0, fd_b = 0;
  std::size_t bias_checks = 0, alpha_checks = 0, b_checks = 0;
  auto rel = [](double got, double fd) { return std::fabs(got - fd) / std::max(1.0, std::fabs(fd)); };
  for (int t = 0; t < n; ++t) {
    const Instance in = random_instance(rng);
    ForwardCache c = make_cache(in.x, in.w, in.q);
    c.lambda = 1e-3;
    const Matrix mixed = backward_tequila(in.gy, c);
    const Matrix plain = backward_ste(in.gy, c);
    for (std::size_t i = 0; i < in.w.size(); ++i) {
      if (!c.mask.mask[i]) continue;
      const std::size_t r = i / in.w.cols();
      auto objective = [&](double dw) {
        WeightMatrix w = in.w;
        w.values()[i] += dw;
        const double b = tequila_bias(w, c.mask, c.lambda)[r];
        double s = 0.0;
        for (std::size_t k = 0; k < in.gy.rows(); ++k) s += in.gy(k, r) * b;
        return s;
      };
      const double fd = (objective(h) - objective(-h)) / (2 * h);
      fd_bias = std::max(fd_bias, rel(mixed.values()[i] - plain.values()[i], fd));
      ++bias_checks;
    }

    std::normal_distribution<double> normal(0.0, 0.1);
    c.offsets.resize(in.q.scales.size());
    for (double& b : c.offsets) b = normal(rng);
    auto loss = [&](const ForwardCache& cc, Scheme s) {
      const Matrix y = s == Scheme::Seq   ? forward_seq(in.x, cc)
                       : s == Scheme::Dlt ? forward_dlt(in.x, cc)
                                          : forward_ternary(in.x, cc.quantized);
      return dot(in.gy, y);
    };
    for (Scheme s : {Scheme::Lsq, Scheme::Dlt, Scheme::Seq}) {
      const auto grads = backward_learnable(in.gy, c, s);
      for (std::size_t k = 0; k < grads.grad_alpha.size(); ++k) {
        ForwardCache p = c, m = c;
        p.quantized.scales[k] += h;
        m.quantized.scales[k] -= h;
        fd_alpha = std::max(fd_alpha, rel(grads.grad_alpha[k], (loss(p, s) - loss(m, s)) / (2 * h)));
        ++alpha_checks;
      }
      for (std::size_t k = 0; k < grads.grad_b.size(); ++k) {
        ForwardCache p = c, m = c;
        p.offsets[k] += h;
        m.offsets[k] -= h;
        fd_b = std::max(fd_b, rel(grads.grad_b[k], (loss(p, s) - loss(m, s)) / (2 * h)));
        ++b_checks;
      }
    }
  }
  out.require(fd_bias <= 1e-6, "finite differences, tequila bias path: worst " + fmt(fd_bias) + " over " +
                                   std::to_string(bias_checks) + " dead weights");
  out.require(fd_alpha <= 1e-6, "finite differences, alpha: worst " + fmt(fd_alpha) + " over " +
                                    std::to_string(alpha_checks) + " parameters");
  out.require(fd_b <= 1e-6, "finite differences, b: worst " + fmt(fd_b) + " over " + std::to_string(b_checks) +
                                " parameters");
  return out;
}

Outcome degenerate_reductions() {
  Outcome out;
  std::mt19937_64 rng(3003);
  const int n = 100;
  int teq_f = 0, teq_b = 0, min_f = 0, min_b = 0, dlt_f = 0, dlt_b = 0, seq_f = 0, seq_b = 0;
  for (int t = 0; t < n; ++t) {
    const Instance in = random_instance(rng);
    ForwardCache c = make_cache(in.x, in.w, in.q);
    const auto y = forward_ternary(in.x, in.q).values();
    const auto gw = backward_ste(in.gy, c).values();
    c.lambda = 0.0;
    c.epsilon = 0.0;
    c.bias = tequila_bias(in.w, c.mask, 0.0);
    c.offsets.assign(in.q.scales.size(), 0.0);
    teq_f += oracle::bitwise_equal(forward_tequila(in.x, c).values(), y);
    teq_b += oracle::bitwise_equal(backward_tequila(in.gy, c).values(), gw);
    min_f += oracle::bitwise_equal(forward_minima(in.x, c).values(), y);
    min_b += oracle::bitwise_equal(backward_minima(in.gy, c).values(), gw);
    dlt_f += oracle::bitwise_equal(forward_dlt(in.x, c).values(), y);
    dlt_b += oracle::bitwise_equal(backward_learnable(in.gy, c, Scheme::Dlt).grad_w.values(), gw);
    seq_f += oracle::bitwise_equal(forward_seq(in.x, c).values(), y);
    seq_b += oracle::bitwise_equal(backward_learnable(in.gy, c, Scheme::Seq).grad_w.values(), gw);
  }
  auto line = [&](const char* what, int fwd, int bwd) {
    out.require(fwd == n && bwd == n, std::string(what) + ": forward " + std::to_string(fwd) + "/" +
                                          std::to_string(n) + " bitwise, backward " + std::to_string(bwd) + "/" +
                                          std::to_string(n) + " bitwise");
  };
  line("tequila lambda=0", teq_f, teq_b);
  line("minima eps=0", min_f, min_b);
  if (min_b != n) {
    out.info("minima backward at eps=0 gives eps*sum(sign(x)*g) = 0 for dead weights, while STE gives sum(g*x)");
  }
  line("dlt b=0", dlt_f, dlt_b);
  line("seq b=0", seq_f, seq_b);
  return out;
}

// 4 -------------------------------------------------------------------------

Outcome packing_soundness() {
  Outcome out;
  const auto t0 = std::chrono::steady_clock::now();
  std::set<int> indices;
  int round_trips = 0;
  for (int a = -1; a <= 1; ++a) {
    for (int b = -1; b <= 1; ++b) {
      for (int c = -1; c <= 1; ++c) {
        const Triple tr{static_cast<std::int8_t>(a), static_cast<std::int8_t>(b), static_cast<std::int8_t>(c)};
        const TripleCode code = canonical_code(tr);
        indices.insert(code.index);
        round_trips += decode(code) == tr && code.index < 16;
      }
    }
  }
  out.require(round_trips == 27, "triple round trip: " + std::to_string(round_trips) + "/27");
  out.require(indices.size() == 14, "distinct indices used: " + std::to_string(indices.size()));

  std::mt19937_64 rng(4004);
  PackedModel model;
  for (auto [rows, cols, g] : {std::tuple<std::size_t, std::size_t, std::size_t>{5, 7, 4}, {3, 128, 128}, {4, 131, 64}}) {
    const WeightMatrix w = oracle::random_weights(rows, cols, rng);
    const auto q = quantize(w, BaseScheme::Absmean, Granularity::per_group(g));
    const PackInput in{q, w, deadzone_mask(w, q)};
    auto layer = pack_model(std::span(&in, 1), 1e-3).layers[0];
    out.require(unpack_codes(layer).codes == q.codes, std::to_string(rows) + "x" + std::to_string(cols) + " codes survive packing");
    model.layers.push_back(std::move(layer));
  }
  const fs::path dir = fs::temp_directory_path() / "tequila_acceptance_pack";
  fs::create_directories(dir);
  write_packed(model, dir / "a.tqla");
  write_packed(read_packed(dir / "a.tqla"), dir / "b.tqla");
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  const std::string a = slurp(dir / "a.tqla"), b = slurp(dir / "b.tqla");
  out.require(!a.empty() && a == b && read_packed(dir / "b.tqla") == model,
              "write/read/write byte-identical (" + std::to_string(a.size()) + " bytes)");

  auto bytes = serialize_packed(model);
  const std::size_t at = 12 + 28;  // file header, first layer header
  bytes[at] = static_cast<std::uint8_t>(bytes[at] | 0x0F);
  bool rejected = false;
  try {
    parse_packed(bytes);
  } catch (const FormatError& e) {
    rejected = e.offset() == at;
  }
  out.require(rejected, "index nibble 15 rejected with its byte offset");
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  out.info("runtime " + fmt(ms, 3) + " ms");
  return out;
}

// 5 -------------------------------------------------------------------------

Outcome kernel_equivalence() {
  Outcome out;
  std::mt19937_64 rng(5005);
  std::uniform_real_distribution<double> logu(0.0, 1.0);
  std::normal_distribution<double> normal;
  const int n = 200;
  double worst = 0.0;
  int ragged = 0, passed = 0;
  for (int t = 0; t < n; ++t) {
    // Log-uniform sizes, with the largest shape forced every 25th instance.
    std::size_t rows = static_cast<std::size_t>(std::exp(logu(rng) * std::log(1024.0)));
    std::size_t cols = static_cast<std::size_t>(std::exp(logu(rng) * std::log(4096.0)));
    if (t % 25 == 0) {
      rows = 1024;
      cols = 4096 - (t / 25 % 3);
    }
    rows = std::clamp<std::size_t>(rows, 1, 1024);
    cols = std::clamp<std::size_t>(cols, 1, 4096);
    const std::size_t gs = std::array<std::size_t, 4>{128, 64, 7, 100}[t % 4];
    const Granularity g = t % 10 == 9 ? Granularity::per_channel() : Granularity::per_group(gs);
    ragged += cols % 3 != 0 && (g.kind != GranularityKind::PerGroup || cols % gs != 0);

    WeightMatrix w(rows, cols);
    for (double& v : w.values()) v = 0.02 * normal(rng);
    const auto q = quantize(w, BaseScheme::Absmean, g);
    const auto bias = tequila_bias(w, deadzone_mask(w, q), 1e-3);
    const PackedLayer layer = pack_layer(q, bias, 1e-3);
    std::vector<float> xf(layer.padded_cols(), 0.0f);
    std::vector<double> x(cols);
    for (std::size_t c = 0; c < cols; ++c) {
      xf[c] = static_cast<float>(normal(rng));
      x[c] = xf[c];
    }
    const auto got = lut_gemv(layer, xf);
    const auto want = reference_gemv(q, bias, x);
    double err = 0.0, scale = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      err = std::max(err, std::fabs(static_cast<double>(got[r]) - want[r]));
      scale = std::max(scale, std::fabs(want[r]));
    }
    const double rel = scale > 0.0 ? err / scale : err;
    worst = std::max(worst, rel);
    passed += rel <= 1e-5;
  }
  out.info("instances with cols not divisible by 3 or group size: " + std::to_string(ragged));
  out.require(passed == n, "lut_gemv vs 64-bit reference: " + std::to_string(passed) + "/" + std::to_string(n) +
                               " within 1e-5 (normwise), worst " + fmt(worst));
  return out;
}

// 6 -------------------------------------------------------------------------

Outcome multiplication_free() {
  Outcome out;
  std::mt19937_64 rng(6006);
  for (auto [rows, cols, g] : {std::tuple<std::size_t, std::size_t, std::size_t>{256, 768, 128},
                               {1024, 1024, 128}, {1024, 4096, 128}, {33, 1000, 128}, {17, 130, 64}, {5, 11, 4}}) {
    const WeightMatrix w = oracle::random_matrix(rows, cols, rng, 0.02);
    const auto q = quantize(w, BaseScheme::Absmean, Granularity::per_group(g));
    const PackedLayer layer = pack_layer(q, tequila_bias(w, deadzone_mask(w, q), 1e-3), 1e-3);
    std::vector<float> x(layer.padded_cols(), 0.5f);
    MulCounter lut;
    lut_gemv(layer, x, lut);
    MulCounter dense;
    dense_gemv(std::vector<float>(rows * cols, 0.25f), rows, cols, std::span<const float>(x.data(), cols), &dense);
    const std::uint64_t expect = rows * ((cols + g - 1) / g);
    out.require(lut.total() == expect && lut.segment == 0 && dense.total() == rows * cols,
                std::to_string(rows) + "x" + std::to_string(cols) + " g" + std::to_string(g) + ": lut " +
                    std::to_string(lut.total()) + " (segment " + std::to_string(lut.segment) + ", expected " +
                    std::to_string(expect) + "), dense " + std::to_string(dense.total()));
  }
  const std::vector<BenchShape> shapes{{256, 768}, {1024, 1024}, {1024, 4096}};
  const auto report = bench_gemv(shapes, 5);
  for (const auto& e : report.entries) {
    out.info("measured speedup " + std::to_string(e.rows) + "x" + std::to_string(e.cols) + ": " + fmt(e.speedup, 3) +
             " (informational)");
  }
  return out;
}

// 7 to 9 --------------------------------------------------------------------

const std::vector<Scheme> kCompareSchemes{Scheme::Absmean, Scheme::Minima, Scheme::TequilaNoMixed, Scheme::Tequila};
const std::vector<std::uint64_t> kSeeds{0, 1, 2};
const std::uint64_t kSweepSeed = 0;

struct Run {
  RunSummary row;
  std::vector<double> losses;
};

json run_to_json(const TrainReport& r) {
  json j = to_json(summarize(r));
  j["losses"] = r.losses;
  return j;
}

Run run_from_json(const json& j) {
  Run r;
  r.row.scheme = parse_scheme(j.at("scheme").get<std::string>());
  r.row.lambda = j.at("lambda").get<double>();
  r.row.seed = j.at("seed").get<std::uint64_t>();
  r.row.final_loss = j.at("final_loss").is_null() ? std::nan("") : j.at("final_loss").get<double>();
  r.row.initial_boundary_fraction = j.at("initial_boundary_fraction").get<double>();
  r.row.final_boundary_fraction = j.at("final_boundary_fraction").get<double>();
  r.row.diverged = j.at("diverged").get<bool>();
  r.losses = j.at("losses").get<std::vector<double>>();
  return r;
}

json run_experiments(std::size_t jobs) {
  const TrainConfig base;
  const auto t0 = std::chrono::steady_clock::now();
  const auto compare = run_compare(base, kCompareSchemes, kSeeds, jobs);
  std::vector<double> lambdas;
  for (double l : kDefaultLambdaGrid) {
    if (l != base.lambda) lambdas.push_back(l);  // shared with the compare run
  }
  TrainConfig sweep_base = base;
  sweep_base.scheme = Scheme::Tequila;
  const auto sweep = run_lambda_sweep(sweep_base, lambdas, {kSweepSeed}, jobs);
  json j;
  j["config"] = to_json(base);
  for (const auto& r : compare.reports) j["compare"].push_back(run_to_json(r));
  for (const auto& r : sweep.reports) j["sweep"].push_back(run_to_json(r));
  j["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return j;
}

struct Experiments {
  std::vector<Run> compare;
  std::vector<Run> sweep;
};

Experiments load_experiments(const std::string& data, std::size_t jobs) {
  json j;
  if (!data.empty() && fs::exists(data)) {
    j = read_json_file(data);
    if (j.at("config") != to_json(TrainConfig{})) {
      throw Error(ErrorKind::InvalidParam, data + " was produced with a different default config");
    }
  } else {
    j = run_experiments(jobs);
  }
  Experiments e;
  for (const auto& r : j.at("compare")) e.compare.push_back(run_from_json(r));
  for (const auto& r : j.at("sweep")) e.sweep.push_back(run_from_json(r));
  return e;
}

const Run* find(const std::vector<Run>& runs, Scheme s, std::uint64_t seed, double lambda = -1.0) {
  for (const auto& r : runs) {
    if (r.row.scheme == s && r.row.seed == seed && (lambda < 0.0 || r.row.lambda == lambda)) return &r;
  }
  return nullptr;
}

void table(Outcome& out, const std::vector<Run>& runs) {
  out.info("scheme            lambda   seed  final_loss  boundary(init->final)");
  for (const auto& r : runs) {
    char line[160];
    std::snprintf(line, sizeof line, "%-17s %-8g %-5llu %-11.6f %.4f -> %.4f%s", to_string(r.row.scheme).c_str(),
                  r.row.lambda, static_cast<unsigned long long>(r.row.seed), r.row.final_loss,
                  r.row.initial_boundary_fraction, r.row.final_boundary_fraction, r.row.diverged ? "  diverged" : "");
    out.info(line);
  }
}

Outcome deadzone_trapping(const Experiments& e) {
  Outcome out;
  table(out, e.compare);
  int grew = 0, below = 0;
  for (std::uint64_t seed : kSeeds) {
    const Run* a = find(e.compare, Scheme::Absmean, seed);
    const Run* t = find(e.compare, Scheme::Tequila, seed);
    if (!a || !t) throw Error(ErrorKind::InvalidParam, "experiment data is missing a run");
    grew += a->row.final_boundary_fraction >= 2.0 * a->row.initial_boundary_fraction;
    below += t->row.final_boundary_fraction < a->row.final_boundary_fraction;
    out.info("seed " + std::to_string(seed) + ": absmean " + fmt(a->row.initial_boundary_fraction, 4) + " -> " +
             fmt(a->row.final_boundary_fraction, 4) + ", tequila final " + fmt(t->row.final_boundary_fraction, 4));
  }
  out.require(grew == 3, "absmean final boundary fraction >= 2x initial on " + std::to_string(grew) + "/3 seeds");
  out.require(below >= 2, "tequila final boundary fraction < absmean on " + std::to_string(below) + "/3 seeds (need 2)");
  return out;
}

Outcome convergence_ordering(const Experiments& e) {
  Outcome out;
  table(out, e.compare);
  std::vector<RunSummary> rows;
  for (const auto& r : e.compare) rows.push_back(r.row);
  const double teq = median_final_loss(rows, Scheme::Tequila);
  const double nomix = median_final_loss(rows, Scheme::TequilaNoMixed);
  const double minima = median_final_loss(rows, Scheme::Minima);
  const double absmean = median_final_loss(rows, Scheme::Absmean);
  out.info("median final loss: tequila " + fmt(teq, 8) + ", tequila-no-mixed " + fmt(nomix, 8) + ", minima " +
           fmt(minima, 8) + ", absmean " + fmt(absmean, 8));
  out.info(std::string("inner: tequila <= tequila-no-mixed ") + (teq <= nomix ? "holds" : "fails") +
           ", tequila-no-mixed <= minima " + (nomix <= minima ? "holds" : "fails") + ", minima <= absmean " +
           (minima <= absmean ? "holds" : "fails"));
  out.require(teq < absmean, "outer: tequila " + fmt(teq, 8) + " < absmean " + fmt(absmean, 8));
  return out;
}

Outcome lambda_sweep(const Experiments& e) {
  Outcome out;
  std::vector<Run> runs = e.sweep;
  const Run* shared = find(e.compare, Scheme::Tequila, kSweepSeed);
  const Run* absmean = find(e.compare, Scheme::Absmean, kSweepSeed);
  if (!shared || !absmean) throw Error(ErrorKind::InvalidParam, "experiment data is missing a run");
  runs.push_back(*shared);
  std::sort(runs.begin(), runs.end(), [](const Run& a, const Run& b) { return a.row.lambda < b.row.lambda; });
  table(out, runs);
  const Run* zero = find(runs, Scheme::Tequila, kSweepSeed, 0.0);
  if (!zero) throw Error(ErrorKind::InvalidParam, "sweep has no lambda = 0 run");
  const double limit = zero->row.final_loss * 1.01;
  int ok = 0, total = 0;
  for (const auto& r : runs) {
    if (r.row.lambda == 0.0) continue;
    ++total;
    const bool fine = r.row.final_loss <= limit;
    ok += fine;
    out.info("lambda " + fmt(r.row.lambda) + ": " + fmt(r.row.final_loss, 8) + (fine ? " <= " : " > ") +
             fmt(limit, 8));
  }
  out.require(ok == total, std::to_string(ok) + "/" + std::to_string(total) +
                               " lambda > 0 runs within 1% of the lambda = 0 final loss");
  const bool same = oracle::bitwise_equal(zero->losses, absmean->losses) &&
                    std::memcmp(&zero->row.final_loss, &absmean->row.final_loss, sizeof(double)) == 0;
  out.require(same, "lambda = 0 loss curve and final loss bitwise equal to absmean (" +
                        std::to_string(zero->losses.size()) + " values)");
  return out;
}

// 10 ------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Timing fields are the one documented source of run-to-run variation.
std::string without_timing(const fs::path& p) {
  json j = json::parse(slurp(p));
  for (auto& e : j.at("entries")) {
    e.erase("median_ns");
    e.erase("speedup");
  }
  return j.dump();
}

Outcome determinism(const std::string& cli, const fs::path& work) {
  Outcome out;
  if (cli.empty() || !fs::exists(cli)) throw Error(ErrorKind::InvalidParam, "tequila binary not found: " + cli);
  fs::remove_all(work);
  fs::create_directories(work);
  std::mt19937_64 rng(10010);
  write_matrix_csv(oracle::random_matrix(6, 20, rng, 0.05), work / "w.csv");
  write_matrix_csv(oracle::random_matrix(3, 16, rng), work / "x.csv");

  const std::string small = " --steps 40 --group-size 8 widths=[16,24,8] batch_size=16 eval_size=64 learning_rate=0.001";
  const std::vector<std::pair<std::string, std::string>> commands{
      {"quantize", "quantize --input " + (work / "w.csv").string() + " --group-size 8"},
      {"quantize-twn", "quantize --input " + (work / "w.csv").string() + " --scheme twn --granularity per-channel"},
      {"diagnose", "diagnose --input " + (work / "w.csv").string() + " --group-size 8"},
      {"train", "train --seed 3" + small},
      {"compare", "compare --schemes absmean,minima,tequila --seeds 0,1" + small},
      {"lambda-sweep", "lambda-sweep --lambdas 0,0.001,0.1" + small},
      {"pack", "pack --checkpoint {run}/train/checkpoint.json"},
      {"infer", "infer --model {run}/pack/model.tqla --input " + (work / "x.csv").string() + " --verify"},
      {"bench", "bench --shapes 8x30,16x100 --reps 2"},
  };
  for (const char* run : {"a", "b"}) {
    for (const auto& [name, args] : commands) {
      std::string a = args;
      for (std::size_t at; (at = a.find("{run}")) != std::string::npos;) a.replace(at, 5, (work / run).string());
      const fs::path dir = work / run / name;
      const std::string cmd = "\"" + cli + "\" " + a + " --out " + dir.string() + " > " +
                              (work / run).string() + "_" + name + ".log 2>&1";
      const int status = std::system(cmd.c_str());
      if (status != 0) {
        out.require(false, name + " exited with status " + std::to_string(status));
        return out;
      }
    }
  }
  for (const auto& [name, args] : commands) {
    std::size_t files = 0, same = 0;
    for (const auto& entry : fs::recursive_directory_iterator(work / "a" / name)) {
      if (!entry.is_regular_file()) continue;
      const fs::path rel = fs::relative(entry.path(), work / "a");
      const fs::path other = work / "b" / rel;
      ++files;
      if (!fs::exists(other)) continue;
      if (name == "bench" && rel.filename() == "bench.json") {
        same += without_timing(entry.path()) == without_timing(other);
      } else {
        same += slurp(entry.path()) == slurp(other);
      }
    }
    out.require(files > 0 && same == files, name + ": " + std::to_string(same) + "/" + std::to_string(files) +
                                                " artifacts identical" +
                                                (name == "bench" ? " (bench.json timing fields excluded)" : ""));
  }
  return out;
}

const std::map<int, std::string> kTitles{
    {1, "quantizer oracle suite"},       {2, "backward conformance"},
    {3, "degenerate reductions"},        {4, "packing soundness"},
    {5, "kernel equivalence"},           {6, "multiplication-free property"},
    {7, "deadzone trapping"},            {8, "convergence ordering"},
    {9, "lambda sweep"},                 {10, "determinism"},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tequila acceptance checks"};
  std::string which;
  std::string data;
  std::string cli =
#ifdef TEQUILA_CLI_PATH
      TEQUILA_CLI_PATH;
#else
      "";
#endif
  std::string work = (fs::temp_directory_path() / "tequila_acceptance").string();
  std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
  app.add_option("criterion", which, "1..10, all, or experiments")->required();
  app.add_option("--data", data, "experiment results shared by criteria 7-9");
  app.add_option("--cli", cli, "path to the tequila binary");
  app.add_option("--work", work, "scratch directory");
  app.add_option("--jobs", jobs, "parallel training runs");
  CLI11_PARSE(app, argc, argv);

  try {
    if (which == "experiments") {
      if (data.empty()) throw Error(ErrorKind::InvalidParam, "experiments needs --data");
      const json j = run_experiments(jobs);
      write_json_file(j, data);
      std::cout << "experiments written to " << data << " in " << fmt(j.at("seconds").get<double>(), 4) << " s\n";
      return 0;
    }
    std::vector<int> ids;
    if (which == "all") {
      for (const auto& [id, title] : kTitles) ids.push_back(id);
    } else {
      ids.push_back(std::stoi(which));
      if (!kTitles.count(ids[0])) throw Error(ErrorKind::InvalidParam, "no criterion " + which);
    }
    std::optional<Experiments> experiments;
    auto exp = [&]() -> const Experiments& {
      if (!experiments) experiments = load_experiments(data, jobs);
      return *experiments;
    };
    bool all_pass = true;
    for (int id : ids) {
      const auto t0 = std::chrono::steady_clock::now();
      Outcome o;
      switch (id) {
        case 1: o = quantizer_suite(); break;
        case 2: o = backward_conformance(); break;
        case 3: o = degenerate_reductions(); break;
        case 4: o = packing_soundness(); break;
        case 5: o = kernel_equivalence(); break;
        case 6: o = multiplication_free(); break;
        case 7: o = deadzone_trapping(exp()); break;
        case 8: o = convergence_ordering(exp()); break;
        case 9: o = lambda_sweep(exp()); break;
        case 10: o = determinism(cli, fs::path(work) / "determinism"); break;
      }
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      for (const auto& n : o.notes) std::cout << "  " << n << "\n";
      std::cout << "criterion " << id << " (" << kTitles.at(id) << "): " << (o.pass ? "PASS" : "FAIL") << "  ["
                << fmt(s, 3) << " s]\n";
      all_pass = all_pass && o.pass;
    }
    return all_pass ? 0 : 1;
  } catch (const std::exception& e) {
    std::cout << "criterion " << which << ": FAIL (error: " << e.what() << ")\n";
    return 1;
  }
}
