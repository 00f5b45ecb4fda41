#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tequila/diagnostics.hpp"
#include "tequila/qat.hpp"

namespace tequila {

enum class Task { SyntheticRegression, CharLm };
enum class Activation { Relu, Tanh };

std::string to_string(Task task);
Task parse_task(std::string_view name);
std::string to_string(Activation a);
Activation parse_activation(std::string_view name);

struct TrainConfig {
  Scheme scheme = Scheme::Tequila;
  Granularity granularity = Granularity::per_group(128);
  double lambda = kDefaultLambda;
  double epsilon = kDefaultEpsilon;
  std::uint64_t seed = 0;
  std::size_t steps = 2000;
  std::size_t batch_size = 64;
  /// Input width, hidden widths..., output width. Three linear layers by default.
  std::vector<std::size_t> widths{128, 128, 128, 128};
  Task task = Task::SyntheticRegression;
  Activation activation = Activation::Tanh;
  double learning_rate = kDefaultLearningRate;
  double teacher_bias_std = 0.5;
  std::size_t snapshot_every = kDefaultSnapshotEvery;
  std::size_t history = kDefaultHistoryLength;
  double band = kDefaultBand;
  std::size_t eval_size = 512;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Reads a config object; unknown keys are rejected with InvalidParam.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// Final state of one student layer, enough to re-quantize and pack it.
struct LayerState {
  WeightMatrix weights;
  std::vector<double> alpha;
  std::vector<double> delta;
  std::vector<double> offsets;
};

struct TrainReport {
  TrainConfig config;
  std::vector<double> losses;  // losses[t] is the training loss before update t
  std::vector<TrapReport> snapshots;
  double initial_eval_loss = 0.0;
  double final_eval_loss = 0.0;
  bool diverged = false;
  std::size_t divergence_step = 0;
  std::string message;
  double wall_time_s = 0.0;  // not part of the JSON form
  std::vector<LayerState> layers;

  double last_decile_mean() const;
  const TrapReport& final_snapshot() const { return snapshots.back(); }
};

/// Deterministic JSON form: config echo, loss curve, snapshot summaries.
nlohmann::json to_json(const TrainReport& r);

TrainReport train_toy(const TrainConfig& config);

/// The student network before any update, built exactly as train_toy builds it.
std::vector<QuantLinearLayer> make_student(const TrainConfig& config);

}  // namespace tequila
