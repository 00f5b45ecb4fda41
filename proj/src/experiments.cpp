#include "tequila/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include "tequila/error.hpp"
#include "tequila/io.hpp"

namespace tequila {

namespace {

ExperimentResult finish(std::vector<TrainReport> reports) {
  std::vector<std::size_t> order(reports.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ca = reports[a].config;
    const auto& cb = reports[b].config;
    const std::string sa = to_string(ca.scheme), sb = to_string(cb.scheme);
    if (sa != sb) return sa < sb;
    if (ca.lambda != cb.lambda) return ca.lambda < cb.lambda;
    return ca.seed < cb.seed;
  });
  ExperimentResult out;
  for (std::size_t i : order) {
    out.rows.push_back(summarize(reports[i]));
    out.reports.push_back(std::move(reports[i]));
  }
  return out;
}

nlohmann::json matrix_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"values", m.values()}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
  return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                j.at("values").get<std::vector<double>>());
}

template <typename T, typename Parse>
std::vector<T> list_setting(const nlohmann::json& v, Parse parse) {
  std::vector<T> out;
  if (v.is_array()) {
    for (const auto& e : v) out.push_back(parse(e));
  } else if (v.is_string()) {
    std::stringstream ss(v.get<std::string>());
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      nlohmann::json e = nlohmann::json::parse(item, nullptr, false);
      out.push_back(parse(e.is_discarded() ? nlohmann::json(item) : e));
    }
  } else {
    out.push_back(parse(v));
  }
  return out;
}

Scheme scheme_setting(const nlohmann::json& v) { return parse_scheme(v.get<std::string>()); }

BenchShape shape_setting(const nlohmann::json& v) {
  if (v.is_array() && v.size() == 2) return {v[0].get<std::size_t>(), v[1].get<std::size_t>()};
  const std::string s = v.get<std::string>();
  const auto x = s.find('x');
  if (x == std::string::npos) throw Error(ErrorKind::InvalidParam, "shape '" + s + "' is not ROWSxCOLS");
  const auto rows = parse_double(s.substr(0, x));
  const auto cols = parse_double(s.substr(x + 1));
  if (!(rows >= 1 && cols >= 1) || rows != std::floor(rows) || cols != std::floor(cols)) {
    throw Error(ErrorKind::InvalidParam, "shape '" + s + "' needs positive integer sizes");
  }
  return {static_cast<std::size_t>(rows), static_cast<std::size_t>(cols)};
}

}  // namespace

RunSummary summarize(const TrainReport& report) {
  RunSummary s;
  s.scheme = report.config.scheme;
  s.lambda = report.config.lambda;
  s.seed = report.config.seed;
  s.final_loss = report.final_eval_loss;
  s.last_decile_mean = report.last_decile_mean();
  if (!report.snapshots.empty()) {
    s.initial_boundary_fraction = report.snapshots.front().boundary_fraction;
    s.final_boundary_fraction = report.final_snapshot().boundary_fraction;
    s.mean_flip_rate = report.final_snapshot().mean_flip_rate;
  }
  s.diverged = report.diverged;
  return s;
}

std::vector<TrainReport> run_many(const std::vector<TrainConfig>& configs, std::size_t jobs) {
  for (const auto& c : configs) c.validate();
  std::vector<TrainReport> reports(configs.size());
  const std::size_t workers = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(1, configs.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < configs.size(); ++i) reports[i] = train_toy(configs[i]);
    return reports;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < configs.size(); i = next++) {
          try {
            reports[i] = train_toy(configs[i]);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
  return reports;
}

ExperimentResult run_compare(const TrainConfig& base, const std::vector<Scheme>& schemes,
                             const std::vector<std::uint64_t>& seeds, std::size_t jobs) {
  if (schemes.size() < 2) throw Error(ErrorKind::InvalidParam, "compare needs at least two schemes");
  if (seeds.empty()) throw Error(ErrorKind::InvalidParam, "compare needs at least one seed");
  std::vector<TrainConfig> configs;
  for (Scheme s : schemes) {
    for (std::uint64_t seed : seeds) {
      TrainConfig c = base;
      c.scheme = s;
      c.seed = seed;
      configs.push_back(c);
    }
  }
  return finish(run_many(configs, jobs));
}

ExperimentResult run_lambda_sweep(const TrainConfig& base, const std::vector<double>& lambdas,
                                  const std::vector<std::uint64_t>& seeds, std::size_t jobs) {
  if (lambdas.size() < 2) throw Error(ErrorKind::InvalidParam, "sweep needs at least two lambda values");
  if (seeds.empty()) throw Error(ErrorKind::InvalidParam, "sweep needs at least one seed");
  std::vector<TrainConfig> configs;
  for (double l : lambdas) {
    for (std::uint64_t seed : seeds) {
      TrainConfig c = base;
      c.lambda = l;
      c.seed = seed;
      configs.push_back(c);
    }
  }
  return finish(run_many(configs, jobs));
}

std::string summary_csv(const std::vector<RunSummary>& rows) {
  std::string out =
      "scheme,lambda,seed,final_loss,last_decile_mean,initial_boundary_fraction,"
      "final_boundary_fraction,mean_flip_rate,diverged\n";
  for (const auto& r : rows) {
    out += to_string(r.scheme) + ',' + format_double(r.lambda) + ',' + std::to_string(r.seed) + ',' +
           format_double(r.final_loss) + ',' + format_double(r.last_decile_mean) + ',' +
           format_double(r.initial_boundary_fraction) + ',' + format_double(r.final_boundary_fraction) +
           ',' + format_double(r.mean_flip_rate) + ',' + (r.diverged ? "1" : "0") + '\n';
  }
  return out;
}

nlohmann::json to_json(const RunSummary& r) {
  return {{"scheme", to_string(r.scheme)},
          {"lambda", r.lambda},
          {"seed", r.seed},
          {"final_loss", r.final_loss},
          {"last_decile_mean", r.last_decile_mean},
          {"initial_boundary_fraction", r.initial_boundary_fraction},
          {"final_boundary_fraction", r.final_boundary_fraction},
          {"mean_flip_rate", r.mean_flip_rate},
          {"diverged", r.diverged}};
}

double median_final_loss(const std::vector<RunSummary>& rows, Scheme scheme) {
  std::vector<double> v;
  for (const auto& r : rows) {
    if (r.scheme == scheme) v.push_back(r.final_loss);
  }
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string loss_csv(const std::vector<double>& losses) {
  std::string out = "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) {
    out += std::to_string(i) + ',' + format_double(losses[i]) + '\n';
  }
  return out;
}

void write_train_artifacts(const TrainReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create " + dir.string() + ": " + ec.message());
  write_json_file(to_json(report), dir / "train_report.json");
  write_text_file(dir / "loss.csv", loss_csv(report.losses));
  if (!report.snapshots.empty()) export_report(report.snapshots, dir / "trap");
  write_json_file(checkpoint_to_json(report), dir / "checkpoint.json");
}

nlohmann::json checkpoint_to_json(const TrainReport& report) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : report.layers) {
    layers.push_back({{"weights", matrix_json(l.weights)},
                      {"alpha", l.alpha},
                      {"delta", l.delta},
                      {"offsets", l.offsets}});
  }
  return {{"format", "tequila-checkpoint"}, {"version", 1}, {"config", to_json(report.config)},
          {"layers", layers}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "tequila-checkpoint") {
      throw Error(ErrorKind::FormatError, "not a checkpoint file");
    }
    if (j.at("version").get<int>() != 1) throw Error(ErrorKind::FormatError, "unsupported checkpoint version");
    Checkpoint c;
    c.config = train_config_from_json(j.at("config"));
    for (const auto& l : j.at("layers")) {
      c.layers.push_back({matrix_from_json(l.at("weights")), l.at("alpha").get<std::vector<double>>(),
                          l.at("delta").get<std::vector<double>>(),
                          l.at("offsets").get<std::vector<double>>()});
    }
    if (c.layers.empty()) throw Error(ErrorKind::FormatError, "checkpoint has no layers");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::FormatError, std::string("checkpoint: ") + e.what());
  }
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return checkpoint_from_json(read_json_file(path)); }

std::vector<QuantLinearLayer> restore_layers(const Checkpoint& ckpt) {
  const LayerOptions opts{ckpt.config.granularity, ckpt.config.lambda, ckpt.config.epsilon};
  std::vector<QuantLinearLayer> layers;
  for (std::size_t i = 0; i < ckpt.layers.size(); ++i) {
    const auto& s = ckpt.layers[i];
    if (i > 0 && s.weights.cols() != ckpt.layers[i - 1].weights.rows()) {
      throw Error(ErrorKind::InvalidShape, "checkpoint layer " + std::to_string(i) + " does not chain");
    }
    QuantLinearLayer layer(s.weights, ckpt.config.scheme, opts);
    layer.restore_state(s.alpha, s.delta, s.offsets);
    layers.push_back(std::move(layer));
  }
  return layers;
}

PackedModel pack_checkpoint(const Checkpoint& ckpt) {
  const Scheme s = ckpt.config.scheme;
  if (s == Scheme::Seq || s == Scheme::Dlt || s == Scheme::Minima) {
    throw Error(ErrorKind::UnsupportedScheme,
                "scheme '" + to_string(s) + "' has no codes-times-scale deployment form");
  }
  const bool biased = s == Scheme::Tequila || s == Scheme::TequilaNoMixed;
  std::vector<PackInput> inputs;
  for (const auto& layer : restore_layers(ckpt)) {
    QuantizedTensor q = layer.quantize_now();
    DeadzoneMask mask = deadzone_mask(layer.shadow_weights(), q);
    inputs.push_back({std::move(q), layer.shadow_weights(), std::move(mask)});
  }
  return pack_model(inputs, biased ? ckpt.config.lambda : 0.0);
}

std::pair<std::string, nlohmann::json> parse_override(std::string_view text) {
  const auto eq = text.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw Error(ErrorKind::InvalidParam, "override '" + std::string(text) + "' is not key=value");
  }
  const std::string key(text.substr(0, eq));
  const std::string value(text.substr(eq + 1));
  nlohmann::json v = nlohmann::json::parse(value, nullptr, false);
  if (v.is_discarded()) v = value;
  return {key, v};
}

Settings apply_settings(const nlohmann::json& j, Settings s) {
  if (!j.is_object()) throw Error(ErrorKind::InvalidParam, "settings must be a JSON object");
  nlohmann::json train = nlohmann::json::object();
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "schemes") s.schemes = list_setting<Scheme>(v, scheme_setting);
      else if (key == "seeds") s.seeds = list_setting<std::uint64_t>(v, [](const nlohmann::json& e) { return e.get<std::uint64_t>(); });
      else if (key == "lambdas") s.lambdas = list_setting<double>(v, [](const nlohmann::json& e) { return e.get<double>(); });
      else if (key == "shapes") s.shapes = list_setting<BenchShape>(v, shape_setting);
      else if (key == "repetitions") s.repetitions = v.get<std::size_t>();
      else if (key == "jobs") s.jobs = v.get<std::size_t>();
      else if (key == "widths" && v.is_string()) {
        train[key] = list_setting<std::size_t>(v, [](const nlohmann::json& e) { return e.get<std::size_t>(); });
      } else train[key] = v;
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidParam, std::string("setting has the wrong type: ") + e.what());
  }
  s.train = train_config_from_json(train, s.train);
  if (s.repetitions == 0) throw Error(ErrorKind::InvalidParam, "repetitions must be >= 1");
  return s;
}

nlohmann::json to_json(const Settings& s) {
  nlohmann::json j = to_json(s.train);
  nlohmann::json schemes = nlohmann::json::array();
  for (Scheme sc : s.schemes) schemes.push_back(to_string(sc));
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& sh : s.shapes) shapes.push_back({sh.rows, sh.cols});
  j["schemes"] = schemes;
  j["seeds"] = s.seeds;
  j["lambdas"] = s.lambdas;
  j["shapes"] = shapes;
  j["repetitions"] = s.repetitions;
  return j;
}

}  // namespace tequila
