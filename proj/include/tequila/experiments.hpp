#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tequila/lut_gemv.hpp"
#include "tequila/packer.hpp"
#include "tequila/train.hpp"

namespace tequila {

/// One row of a comparison or sweep table.
struct RunSummary {
  Scheme scheme = Scheme::Absmean;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  double final_loss = 0.0;  // held-out eval loss after the last step
  double last_decile_mean = 0.0;
  double initial_boundary_fraction = 0.0;
  double final_boundary_fraction = 0.0;
  double mean_flip_rate = 0.0;
  bool diverged = false;

  friend bool operator==(const RunSummary&, const RunSummary&) = default;
};

RunSummary summarize(const TrainReport& report);

/// Runs every config, up to `jobs` at a time. Results come back in input
/// order whatever the scheduling.
std::vector<TrainReport> run_many(const std::vector<TrainConfig>& configs, std::size_t jobs = 1);

struct ExperimentResult {
  std::vector<RunSummary> rows;      // sorted by scheme name, lambda, seed
  std::vector<TrainReport> reports;  // same order as rows
};

ExperimentResult run_compare(const TrainConfig& base, const std::vector<Scheme>& schemes,
                             const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1);

inline const std::vector<double> kDefaultLambdaGrid{0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1};

/// Trains `base.scheme` once per (lambda, seed).
ExperimentResult run_lambda_sweep(const TrainConfig& base, const std::vector<double>& lambdas,
                                  const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1);

std::string summary_csv(const std::vector<RunSummary>& rows);
nlohmann::json to_json(const RunSummary& row);

/// Median final loss over the rows of one scheme; NaN when it has none.
double median_final_loss(const std::vector<RunSummary>& rows, Scheme scheme);

// Run artifacts ------------------------------------------------------------

/// Writes train_report.json, loss.csv, trap.csv, trap.json and
/// checkpoint.json into `dir` (created if missing).
void write_train_artifacts(const TrainReport& report, const std::filesystem::path& dir);

std::string loss_csv(const std::vector<double>& losses);

struct Checkpoint {
  TrainConfig config;
  std::vector<LayerState> layers;
};

nlohmann::json checkpoint_to_json(const TrainReport& report);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Student layers carrying the checkpoint's weights and learned state.
std::vector<QuantLinearLayer> restore_layers(const Checkpoint& ckpt);

/// Packs a trained model. Schemes whose forward is not codes * alpha plus an
/// optional per-row bias (seq, dlt, minima) are rejected with UnsupportedScheme.
PackedModel pack_checkpoint(const Checkpoint& ckpt);

// Settings -----------------------------------------------------------------

/// Everything a subcommand can be configured with: the training keys of
/// TrainConfig plus the experiment lists and bench parameters.
struct Settings {
  TrainConfig train;
  std::vector<Scheme> schemes{Scheme::Absmean, Scheme::Minima, Scheme::TequilaNoMixed, Scheme::Tequila};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<double> lambdas = kDefaultLambdaGrid;
  std::vector<BenchShape> shapes{{256, 768}, {1024, 1024}, {1024, 4096}};
  std::size_t repetitions = 20;
  std::size_t jobs = 1;
};

/// Parses "key=value". The value is read as JSON when it parses, otherwise
/// kept as a string.
std::pair<std::string, nlohmann::json> parse_override(std::string_view text);

/// Applies a JSON object of settings on top of `base`. Unknown keys are
/// rejected with InvalidParam. List keys also accept comma-separated strings.
Settings apply_settings(const nlohmann::json& j, Settings base = {});

nlohmann::json to_json(const Settings& s);

}  // namespace tequila
