// tequila: command-line front end for quantization, QAT experiments,
// packing and LUT inference.
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tequila/diagnostics.hpp"
#include "tequila/error.hpp"
#include "tequila/experiments.hpp"
#include "tequila/io.hpp"
#include "tequila/lut_gemv.hpp"
#include "tequila/packer.hpp"
#include "tequila/quantizer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tequila;

namespace {

enum ExitCode {
  kOk = 0,
  kOther = 1,
  kUsage = 2,
  kFormat = 3,
  kShape = 4,
  kDiverged = 5,
  kUnsupported = 6,
  kIo = 7,
  kVerifyFailed = 8,
};

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidParam:
    case ErrorKind::InvalidThreshold: return kUsage;
    case ErrorKind::FormatError:
    case ErrorKind::InvalidCode: return kFormat;
    case ErrorKind::InvalidShape: return kShape;
    case ErrorKind::Divergence:
    case ErrorKind::GradientError: return kDiverged;
    case ErrorKind::UnsupportedScheme: return kUnsupported;
    case ErrorKind::IoError: return kIo;
    default: return kOther;
  }
}

// Flags shared by every subcommand. Each one maps onto a settings key.
struct Common {
  std::string config;
  std::string out = "out";
  std::uint64_t seed = 0;
  std::string scheme;
  std::string granularity;
  std::size_t group_size = 0;
  double lambda = 0.0;
  double epsilon = 0.0;
  std::size_t steps = 0;
  std::vector<std::string> overrides;
  std::map<std::string, CLI::Option*> flags;
};

Common& add_common(CLI::App* app, std::deque<Common>& all) {
  Common& c = all.emplace_back();
  app->add_option("--config", c.config, "JSON settings file")->check(CLI::ExistingFile);
  app->add_option("--out", c.out, "output directory")->capture_default_str();
  c.flags["seed"] = app->add_option("--seed", c.seed, "random seed");
  c.flags["scheme"] = app->add_option("--scheme", c.scheme, "quantization scheme");
  c.flags["granularity"] = app->add_option("--granularity", c.granularity, "per-tensor | per-channel | per-group");
  c.flags["group_size"] = app->add_option("--group-size", c.group_size, "group size for per-group");
  c.flags["lambda"] = app->add_option("--lambda", c.lambda, "Tequila reactivation strength");
  c.flags["epsilon"] = app->add_option("--epsilon", c.epsilon, "Minima reactivation magnitude");
  c.flags["steps"] = app->add_option("--steps", c.steps, "training steps");
  app->add_option("overrides", c.overrides, "key=value settings, applied last");
  return c;
}

// Defaults, then the config file, then flags, then key=value overrides.
Settings resolve(const Common& c, const json& extra_flags = json::object(), Settings s = {}) {
  if (!c.config.empty()) s = apply_settings(read_json_file(c.config), s);
  json flags = extra_flags;
  if (c.flags.at("seed")->count()) flags["seed"] = c.seed;
  if (c.flags.at("scheme")->count()) flags["scheme"] = c.scheme;
  if (c.flags.at("granularity")->count()) flags["granularity"] = c.granularity;
  if (c.flags.at("group_size")->count()) flags["group_size"] = c.group_size;
  if (c.flags.at("lambda")->count()) flags["lambda"] = c.lambda;
  if (c.flags.at("epsilon")->count()) flags["epsilon"] = c.epsilon;
  if (c.flags.at("steps")->count()) flags["steps"] = c.steps;
  if (!flags.empty()) s = apply_settings(flags, s);
  json overrides = json::object();
  for (const auto& o : c.overrides) {
    auto [key, value] = parse_override(o);
    overrides[key] = value;
  }
  if (!overrides.empty()) s = apply_settings(overrides, s);
  return s;
}

fs::path prepare_out(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create " + out + ": " + ec.message());
  return fs::path(out);
}

BaseScheme base_scheme(Scheme s) {
  if (s == Scheme::Absmean) return BaseScheme::Absmean;
  if (s == Scheme::Twn) return BaseScheme::Twn;
  throw Error(ErrorKind::UnsupportedScheme,
              "scheme '" + to_string(s) + "' has no post-training quantizer; use absmean or twn");
}

// Per-channel is stored as per-group with one group per row.
Settings ptq_defaults() {
  Settings s;
  s.train.scheme = Scheme::Absmean;
  return s;
}

Granularity canonical(Granularity g, std::size_t cols) {
  return g.kind == GranularityKind::PerChannel ? Granularity::per_group(cols) : g;
}

json quantized_json(const QuantizedTensor& q, BaseScheme scheme) {
  std::vector<int> codes(q.codes.begin(), q.codes.end());
  return {{"format", "tequila-quantized"},
          {"version", 1},
          {"scheme", to_string(scheme)},
          {"rows", q.rows},
          {"cols", q.cols},
          {"granularity", to_string(q.granularity.kind)},
          {"group_size", q.granularity.group_size},
          {"scales", q.scales},
          {"thresholds", q.thresholds},
          {"codes", codes}};
}

int cmd_quantize(const Common& c, const std::string& input) {
  const Settings s = resolve(c, json::object(), ptq_defaults());
  const BaseScheme scheme = base_scheme(s.train.scheme);
  const WeightMatrix w = read_matrix(input);
  const Granularity g = canonical(s.train.granularity, w.cols());
  const QuantizedTensor q = quantize(w, scheme, g);
  const fs::path out = prepare_out(c.out);
  write_json_file(quantized_json(q, scheme), out / "quantized.json");

  json groups = json::array();
  for (std::size_t i = 0; i < q.scales.size(); ++i) {
    groups.push_back({{"group", i}, {"alpha", q.scales[i]}, {"delta", q.thresholds[i]}});
  }
  const double dz = deadzone_fraction(w, q);
  json summary = {{"format", "tequila-quantize-summary"},
                  {"version", 1},
                  {"config", to_json(s)},
                  {"rows", q.rows},
                  {"cols", q.cols},
                  {"groups", groups},
                  {"deadzone_fraction", dz},
                  {"boundary_fraction", boundary_fraction(w, q, s.train.band)}};
  write_json_file(summary, out / "summary.json");
  std::cout << "quantized " << q.rows << "x" << q.cols << " into " << q.scales.size()
            << " group(s), deadzone_fraction " << format_double(dz) << "\n";
  return kOk;
}

int cmd_diagnose(const Common& c, const std::string& input) {
  const Settings s = resolve(c, json::object(), ptq_defaults());
  const BaseScheme scheme = base_scheme(s.train.scheme);
  const WeightMatrix w = read_matrix(input);
  const QuantizedTensor q = quantize(w, scheme, canonical(s.train.granularity, w.cols()));
  TrapReport r;
  r.band = s.train.band;
  r.deadzone_fraction = deadzone_fraction(w, q);
  r.boundary_fraction = boundary_fraction(w, q, s.train.band);
  r.histogram = weight_histogram(w, q);
  const fs::path out = prepare_out(c.out);
  export_report({r}, out / "trap");
  write_json_file({{"format", "tequila-diagnose"},
                   {"version", 1},
                   {"config", to_json(s)},
                   {"deadzone_fraction", r.deadzone_fraction},
                   {"boundary_fraction", r.boundary_fraction},
                   {"trap_report", {{"csv", "trap.csv"}, {"json", "trap.json"}}}},
                  out / "diagnose.json");
  std::cout << "deadzone_fraction " << format_double(r.deadzone_fraction) << ", boundary_fraction "
            << format_double(r.boundary_fraction) << "\n";
  return kOk;
}

int cmd_train(const Common& c) {
  const Settings s = resolve(c);
  const TrainReport report = train_toy(s.train);
  write_train_artifacts(report, prepare_out(c.out));
  std::cerr << "wall time " << report.wall_time_s << " s\n";
  if (report.diverged) {
    std::cerr << "diverged: " << report.message << "\n";
    return kDiverged;
  }
  std::cout << to_string(s.train.scheme) << " seed " << s.train.seed << ": final loss "
            << format_double(report.final_eval_loss) << ", boundary_fraction "
            << format_double(report.final_snapshot().boundary_fraction) << "\n";
  return kOk;
}

std::string run_dir_name(const RunSummary& r) {
  return to_string(r.scheme) + "_lambda" + format_double(r.lambda) + "_seed" + std::to_string(r.seed);
}

int write_experiment(const Settings& s, const ExperimentResult& res, const fs::path& out,
                     const std::string& stem, json extra) {
  bool diverged = false;
  json rows = json::array();
  for (std::size_t i = 0; i < res.rows.size(); ++i) {
    diverged = diverged || res.rows[i].diverged;
    rows.push_back(to_json(res.rows[i]));
    write_train_artifacts(res.reports[i], out / "runs" / run_dir_name(res.rows[i]));
  }
  write_text_file(out / (stem + ".csv"), summary_csv(res.rows));
  json j = {{"format", "tequila-" + stem}, {"version", 1}, {"config", to_json(s)}, {"rows", rows}};
  j.update(extra);
  write_json_file(j, out / (stem + ".json"));
  std::cout << summary_csv(res.rows);
  return diverged ? kDiverged : kOk;
}

int cmd_compare(const Common& c, const json& flags) {
  const Settings s = resolve(c, flags);
  const ExperimentResult res = run_compare(s.train, s.schemes, s.seeds, s.jobs);
  json medians = json::object();
  for (Scheme sc : s.schemes) medians[to_string(sc)] = median_final_loss(res.rows, sc);
  return write_experiment(s, res, prepare_out(c.out), "compare", {{"median_final_loss", medians}});
}

int cmd_lambda_sweep(const Common& c, const json& flags) {
  Settings base;
  base.seeds.clear();
  Settings s = resolve(c, flags, base);
  if (s.seeds.empty()) s.seeds = {s.train.seed};
  const ExperimentResult res = run_lambda_sweep(s.train, s.lambdas, s.seeds, s.jobs);
  return write_experiment(s, res, prepare_out(c.out), "sweep", json::object());
}

int cmd_pack(const Common& c, const std::string& checkpoint) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  const PackedModel model = pack_checkpoint(ckpt);
  const fs::path out = prepare_out(c.out);
  write_packed(model, out / "model.tqla");
  json layers = json::array();
  for (const auto& l : model.layers) {
    layers.push_back({{"rows", l.rows},
                      {"cols", l.cols},
                      {"padded_cols", l.padded_cols()},
                      {"granularity", to_string(l.granularity.kind)},
                      {"group_size", l.granularity.group_size},
                      {"scale_count", l.scales.size()}});
  }
  write_json_file({{"format", "tequila-pack-summary"},
                   {"version", 1},
                   {"config", to_json(ckpt.config)},
                   {"model", "model.tqla"},
                   {"bytes", serialize_packed(model).size()},
                   {"layers", layers}},
                  out / "pack.json");
  std::cout << "packed " << model.layers.size() << " layer(s) into " << (out / "model.tqla").string() << "\n";
  return kOk;
}

int cmd_infer(const Common& c, const std::string& model_path, const std::string& input, std::size_t layer_index,
              bool verify) {
  const PackedModel model = read_packed(model_path);
  if (layer_index >= model.layers.size()) {
    throw Error(ErrorKind::InvalidParam, "layer " + std::to_string(layer_index) + " out of range, model has " +
                                             std::to_string(model.layers.size()));
  }
  const PackedLayer& layer = model.layers[layer_index];
  const Matrix x = read_matrix(input);
  if (x.cols() != layer.cols && x.cols() != layer.padded_cols()) {
    throw Error(ErrorKind::InvalidShape, "input has " + std::to_string(x.cols()) + " values per row, layer expects " +
                                             std::to_string(layer.cols) + " (or " +
                                             std::to_string(layer.padded_cols()) + " padded)");
  }
  const QuantizedTensor q = unpack_codes(layer);
  const BiasVector bias(layer.bias.begin(), layer.bias.end());
  Matrix y(x.rows(), layer.rows);
  double max_err = 0.0, max_ref = 0.0;
  for (std::size_t b = 0; b < x.rows(); ++b) {
    std::vector<float> xf(layer.padded_cols(), 0.0f);
    for (std::size_t j = 0; j < layer.cols; ++j) xf[j] = static_cast<float>(x(b, j));
    const auto yb = lut_gemv(layer, xf);
    for (std::size_t r = 0; r < layer.rows; ++r) y(b, r) = yb[r];
    if (verify) {
      // The reference sees the same float-rounded input the kernel saw.
      const std::vector<double> xd(xf.begin(), xf.begin() + static_cast<std::ptrdiff_t>(layer.cols));
      const auto ref = reference_gemv(q, bias, xd);
      for (std::size_t r = 0; r < layer.rows; ++r) {
        max_err = std::max(max_err, std::abs(static_cast<double>(yb[r]) - ref[r]));
        max_ref = std::max(max_ref, std::abs(ref[r]));
      }
    }
  }
  const fs::path out = prepare_out(c.out);
  write_matrix_csv(y, out / "y.csv");
  json j = {{"format", "tequila-infer"}, {"version", 1}, {"layer", layer_index},
            {"rows", layer.rows},        {"cols", layer.cols}, {"inputs", x.rows()}};
  bool passed = true;
  if (verify) {
    constexpr double kTolerance = 1e-5;
    const double rel = max_ref > 0.0 ? max_err / max_ref : max_err;
    passed = rel <= kTolerance;
    j["verify"] = {{"passed", passed}, {"max_abs_error", max_err}, {"max_abs_reference", max_ref},
                   {"relative_error", rel}, {"tolerance", kTolerance}};
    std::cout << "verify " << (passed ? "passed" : "FAILED") << ": relative error " << format_double(rel) << "\n";
  }
  write_json_file(j, out / "infer.json");
  return passed ? kOk : kVerifyFailed;
}

int cmd_bench(const Common& c, const json& flags) {
  const Settings s = resolve(c, flags);
  const std::size_t group = s.train.granularity.kind == GranularityKind::PerGroup ? s.train.granularity.group_size : 0;
  if (group == 0) throw Error(ErrorKind::InvalidParam, "bench uses per-group granularity");
  const BenchReport report = bench_gemv(s.shapes, s.repetitions, group, s.train.seed);
  json j = to_json(report);
  j["config"] = {{"shapes", to_json(s)["shapes"]}, {"repetitions", s.repetitions}, {"group_size", group},
                 {"seed", s.train.seed}};
  write_json_file(j, prepare_out(c.out) / "bench.json");
  for (const auto& e : report.entries) {
    std::cout << e.rows << "x" << e.cols << ": multiplies lut " << e.lut_multiplies << " vs dense "
              << e.dense_multiplies << ", speedup " << e.speedup << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ternary quantization toolkit: quantize, train, pack and run LUT inference"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  std::deque<Common> commons;
  std::string input, checkpoint, model;
  std::size_t layer = 0;
  bool verify = false;
  std::vector<std::string> schemes, shapes;
  std::vector<std::uint64_t> seeds;
  std::vector<double> lambdas;
  std::size_t jobs = 1, reps = 0;

  auto* quantize_cmd = app.add_subcommand("quantize", "quantize a weight matrix file");
  Common& quantize_common = add_common(quantize_cmd, commons);
  quantize_cmd->add_option("--input", input, "weights (.csv or .bin)")->required();

  auto* diagnose_cmd = app.add_subcommand("diagnose", "deadzone and boundary statistics for a weight file");
  Common& diagnose_common = add_common(diagnose_cmd, commons);
  diagnose_cmd->add_option("--input", input, "weights (.csv or .bin)")->required();

  auto* train_cmd = app.add_subcommand("train", "QAT run on the toy task");
  Common& train_common = add_common(train_cmd, commons);

  auto* compare_cmd = app.add_subcommand("compare", "train several schemes over several seeds");
  Common& compare_common = add_common(compare_cmd, commons);
  auto* schemes_opt = compare_cmd->add_option("--schemes", schemes, "schemes to compare")->delimiter(',');
  auto* seeds_opt = compare_cmd->add_option("--seeds", seeds, "seeds")->delimiter(',');
  auto* jobs_opt = compare_cmd->add_option("--jobs", jobs, "parallel runs");

  auto* sweep_cmd = app.add_subcommand("lambda-sweep", "train over a grid of lambda values");
  Common& sweep_common = add_common(sweep_cmd, commons);
  auto* lambdas_opt = sweep_cmd->add_option("--lambdas", lambdas, "lambda grid")->delimiter(',');
  auto* sweep_seeds_opt = sweep_cmd->add_option("--seeds", seeds, "seeds")->delimiter(',');
  auto* sweep_jobs_opt = sweep_cmd->add_option("--jobs", jobs, "parallel runs");

  auto* pack_cmd = app.add_subcommand("pack", "pack a training checkpoint into a .tqla model");
  Common& pack_common = add_common(pack_cmd, commons);
  pack_cmd->add_option("--checkpoint", checkpoint, "checkpoint.json from train")->required()->check(CLI::ExistingFile);

  auto* infer_cmd = app.add_subcommand("infer", "run one packed layer on input vectors");
  Common& infer_common = add_common(infer_cmd, commons);
  infer_cmd->add_option("--model", model, ".tqla file")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--input", input, "input vectors, one per row (.csv or .bin)")->required();
  infer_cmd->add_option("--layer", layer, "layer index")->capture_default_str();
  infer_cmd->add_flag("--verify", verify, "check against the 64-bit reference");

  auto* bench_cmd = app.add_subcommand("bench", "LUT GEMV vs dense GEMV");
  Common& bench_common = add_common(bench_cmd, commons);
  auto* shapes_opt = bench_cmd->add_option("--shapes", shapes, "ROWSxCOLS list")->delimiter(',');
  auto* reps_opt = bench_cmd->add_option("--reps", reps, "timed repetitions per shape");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*quantize_cmd) return cmd_quantize(quantize_common, input);
    if (*diagnose_cmd) return cmd_diagnose(diagnose_common, input);
    if (*train_cmd) return cmd_train(train_common);
    if (*compare_cmd) {
      json f = json::object();
      if (schemes_opt->count()) f["schemes"] = schemes;
      if (seeds_opt->count()) f["seeds"] = seeds;
      if (jobs_opt->count()) f["jobs"] = jobs;
      return cmd_compare(compare_common, f);
    }
    if (*sweep_cmd) {
      json f = json::object();
      if (lambdas_opt->count()) f["lambdas"] = lambdas;
      if (sweep_seeds_opt->count()) f["seeds"] = seeds;
      if (sweep_jobs_opt->count()) f["jobs"] = jobs;
      return cmd_lambda_sweep(sweep_common, f);
    }
    if (*pack_cmd) return cmd_pack(pack_common, checkpoint);
    if (*infer_cmd) return cmd_infer(infer_common, model, input, layer, verify);
    if (*bench_cmd) {
      json f = json::object();
      if (shapes_opt->count()) f["shapes"] = shapes;
      if (reps_opt->count()) f["repetitions"] = reps;
      return cmd_bench(bench_common, f);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kUsage;
}
