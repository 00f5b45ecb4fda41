#include "tequila/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <set>

#include "tequila/error.hpp"

namespace tequila {

namespace {

constexpr std::size_t kCharContext = 3;

constexpr const char* kCorpus =
    "the quick brown fox jumps over the lazy dog. a small model learns to guess the next "
    "letter from the three letters before it. weights that sit in the dead zone give nothing "
    "to the output, so the loss tells them little about where to go. when many weights wait "
    "at the edge of the zone they flip back and forth and the network learns slowly. giving "
    "those weights a small job of their own lets every one of them pull on the loss again. "
    "the fox ran home, the dog slept on, and the model kept reading the same short story "
    "until the letters began to make sense.";

// Independent generator streams per purpose, all derived from the run seed.
enum Stream : std::uint64_t { kTeacher = 1, kStudent = 2, kData = 3, kEval = 4 };

std::mt19937_64 make_rng(std::uint64_t seed, Stream stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Matrix m(rows, cols);
  for (double& v : m.values()) v = normal(rng);
  return m;
}

double activate(Activation a, double v) { return a == Activation::Relu ? std::max(v, 0.0) : std::tanh(v); }

// Derivative expressed through the activation's output.
double activate_grad(Activation a, double out) {
  return a == Activation::Relu ? (out > 0.0 ? 1.0 : 0.0) : 1.0 - out * out;
}

// y = x W^T (+ b) in full precision.
Matrix dense_forward(const Matrix& x, const Matrix& w, const std::vector<double>& b) {
  Matrix y(x.rows(), w.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t r = 0; r < w.rows(); ++r) {
      double acc = 0.0;
      const auto wr = w.row(r);
      const auto xi = x.row(i);
      for (std::size_t c = 0; c < w.cols(); ++c) acc += wr[c] * xi[c];
      y(i, r) = acc + (b.empty() ? 0.0 : b[r]);
    }
  }
  return y;
}

struct Teacher {
  std::vector<Matrix> weights;
  std::vector<std::vector<double>> biases;
  Activation activation;

  Matrix operator()(Matrix x) const {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      x = dense_forward(x, weights[l], biases[l]);
      if (l + 1 < weights.size()) {
        for (double& v : x.values()) v = activate(activation, v);
      }
    }
    return x;
  }
};

struct Batch {
  Matrix x;
  Matrix target;                   // regression targets
  std::vector<std::size_t> labels;  // char-lm next-character ids
};

class TaskData {
 public:
  explicit TaskData(const TrainConfig& c) : config_(c) {
    if (c.task == Task::CharLm) {
      const std::string text(kCorpus);
      std::set<char> chars(text.begin(), text.end());
      vocab_.assign(chars.begin(), chars.end());
      for (char ch : text) ids_.push_back(index_of(ch));
    } else {
      auto rng = make_rng(c.seed, kTeacher);
      teacher_.activation = c.activation;
      for (std::size_t l = 0; l + 1 < c.widths.size(); ++l) {
        const double std = 1.0 / std::sqrt(static_cast<double>(c.widths[l]));
        teacher_.weights.push_back(gaussian(c.widths[l + 1], c.widths[l], std, rng));
        std::normal_distribution<double> normal(0.0, c.teacher_bias_std);
        std::vector<double> b(c.widths[l + 1]);
        for (double& v : b) v = c.teacher_bias_std > 0.0 ? normal(rng) : 0.0;
        teacher_.biases.push_back(std::move(b));
      }
    }
  }

  std::size_t vocab_size() const { return vocab_.size(); }

  Batch sample(std::size_t n, std::mt19937_64& rng) const {
    Batch batch;
    if (config_.task == Task::CharLm) {
      const std::size_t v = vocab_.size();
      batch.x = Matrix(n, kCharContext * v);
      std::uniform_int_distribution<std::size_t> pos(kCharContext, ids_.size() - 1);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t p = pos(rng);
        for (std::size_t k = 0; k < kCharContext; ++k) batch.x(i, k * v + ids_[p - kCharContext + k]) = 1.0;
        batch.labels.push_back(ids_[p]);
      }
      return batch;
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    batch.x = Matrix(n, config_.widths.front());
    for (double& v : batch.x.values()) v = normal(rng);
    batch.target = teacher_(batch.x);
    return batch;
  }

  // Returns the loss and writes dL/dY into grad.
  double loss(const Matrix& y, const Batch& batch, Matrix* grad) const {
    const double n = static_cast<double>(y.rows());
    if (grad) *grad = Matrix(y.rows(), y.cols());
    double total = 0.0;
    if (config_.task == Task::CharLm) {
      for (std::size_t i = 0; i < y.rows(); ++i) {
        const auto row = y.row(i);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        const double lse = mx + std::log(z);
        total += lse - row[batch.labels[i]];
        if (grad) {
          for (std::size_t k = 0; k < row.size(); ++k) {
            (*grad)(i, k) = (std::exp(row[k] - lse) - (k == batch.labels[i] ? 1.0 : 0.0)) / n;
          }
        }
      }
      return total / n;
    }
    const double count = n * static_cast<double>(y.cols());
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double d = y.values()[i] - batch.target.values()[i];
      total += d * d;
      if (grad) grad->values()[i] = 2.0 * d / count;
    }
    return total / count;
  }

 private:
  std::size_t index_of(char ch) const {
    return static_cast<std::size_t>(std::lower_bound(vocab_.begin(), vocab_.end(), ch) - vocab_.begin());
  }

  TrainConfig config_;
  Teacher teacher_;
  std::vector<char> vocab_;
  std::vector<std::size_t> ids_;
};

std::vector<std::size_t> effective_widths(const TrainConfig& c) {
  std::vector<std::size_t> w = c.widths;
  if (c.task == Task::CharLm) {
    TaskData probe(c);
    w.front() = kCharContext * probe.vocab_size();
    w.back() = probe.vocab_size();
  }
  return w;
}

class Student {
 public:
  Student(std::vector<QuantLinearLayer> layers, Activation a) : layers_(std::move(layers)), act_(a) {}

  Matrix forward(const Matrix& x) {
    outputs_.clear();
    Matrix h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      h = layers_[l].forward(h);
      if (l + 1 < layers_.size()) {
        for (double& v : h.values()) v = activate(act_, v);
        outputs_.push_back(h);
      }
    }
    return h;
  }

  std::vector<LayerGrads> backward(Matrix g) {
    std::vector<LayerGrads> grads(layers_.size());
    for (std::size_t l = layers_.size(); l-- > 0;) {
      grads[l] = layers_[l].backward(g);
      if (l > 0) {
        g = std::move(grads[l].grad_x);
        const Matrix& out = outputs_[l - 1];
        for (std::size_t i = 0; i < g.size(); ++i) g.values()[i] *= activate_grad(act_, out.values()[i]);
      }
    }
    return grads;
  }

  std::vector<QuantLinearLayer>& layers() { return layers_; }

 private:
  std::vector<QuantLinearLayer> layers_;
  Activation act_;
  std::vector<Matrix> outputs_;
};

struct LayerOptimizer {
  OptimizerState weights;
  OptimizerState alpha;
  OptimizerState offsets;
};

TrapReport snapshot(std::size_t step, double loss, const std::vector<QuantLinearLayer>& layers,
                    const CodeHistory& history, const TrainConfig& c) {
  TrapReport rep;
  rep.step = step;
  rep.loss = loss;
  rep.band = c.band;
  rep.histogram = empty_histogram();
  std::size_t total = 0, dead = 0, boundary = 0;
  for (const auto& layer : layers) {
    const auto& cache = *layer.cache();
    total += cache.weights.size();
    dead += deadzone_count(cache.weights, cache.quantized);
    boundary += boundary_count(cache.weights, cache.quantized, c.band);
    rep.histogram.merge(weight_histogram(cache.weights, cache.quantized));
  }
  rep.deadzone_fraction = static_cast<double>(dead) / static_cast<double>(total);
  rep.boundary_fraction = static_cast<double>(boundary) / static_cast<double>(total);
  rep.mean_flip_rate = history.size() >= 2 ? flip_rate(history) : 0.0;
  return rep;
}

std::vector<std::int8_t> current_codes(const std::vector<QuantLinearLayer>& layers) {
  std::vector<std::int8_t> codes;
  for (const auto& layer : layers) {
    const auto& q = layer.cache()->quantized.codes;
    codes.insert(codes.end(), q.begin(), q.end());
  }
  return codes;
}

}  // namespace

std::string to_string(Task task) {
  return task == Task::CharLm ? "char-lm" : "synthetic-regression";
}

Task parse_task(std::string_view name) {
  if (name == "synthetic-regression") return Task::SyntheticRegression;
  if (name == "char-lm") return Task::CharLm;
  throw Error(ErrorKind::InvalidParam, "unknown task '" + std::string(name) + "'");
}

std::string to_string(Activation a) { return a == Activation::Relu ? "relu" : "tanh"; }

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::Relu;
  if (name == "tanh") return Activation::Tanh;
  throw Error(ErrorKind::InvalidParam, "unknown activation '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error(ErrorKind::InvalidParam, what); };
  if (widths.size() < 2) bad("widths needs at least input and output sizes");
  if (std::find(widths.begin(), widths.end(), std::size_t{0}) != widths.end()) bad("widths must be >= 1");
  if (batch_size == 0) bad("batch_size must be >= 1");
  if (eval_size == 0) bad("eval_size must be >= 1");
  if (snapshot_every == 0) bad("snapshot_every must be >= 1");
  if (history < 2) bad("history must be >= 2");
  if (!(band > 0.0 && band < 1.0)) bad("band must be in (0, 1)");
  if (!std::isfinite(lambda) || !std::isfinite(epsilon)) bad("lambda and epsilon must be finite");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) bad("learning_rate must be > 0");
  if (granularity.kind == GranularityKind::PerGroup && granularity.group_size == 0) bad("group_size must be >= 1");
  if (!(teacher_bias_std >= 0.0)) bad("teacher_bias_std must be >= 0");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"scheme", to_string(c.scheme)},
          {"granularity", to_string(c.granularity.kind)},
          {"group_size", c.granularity.group_size},
          {"lambda", c.lambda},
          {"epsilon", c.epsilon},
          {"seed", c.seed},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"widths", c.widths},
          {"task", to_string(c.task)},
          {"activation", to_string(c.activation)},
          {"learning_rate", c.learning_rate},
          {"teacher_bias_std", c.teacher_bias_std},
          {"snapshot_every", c.snapshot_every},
          {"history", c.history},
          {"band", c.band},
          {"eval_size", c.eval_size}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw Error(ErrorKind::InvalidParam, "train config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "scheme") c.scheme = parse_scheme(v.get<std::string>());
      else if (key == "granularity") {
        c.granularity.kind = parse_granularity_kind(v.get<std::string>());
        if (c.granularity.kind != GranularityKind::PerGroup) c.granularity.group_size = 0;
        else if (c.granularity.group_size == 0) c.granularity.group_size = 128;
      }
      else if (key == "group_size") c.granularity.group_size = v.get<std::size_t>();
      else if (key == "lambda") c.lambda = v.get<double>();
      else if (key == "epsilon") c.epsilon = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "steps") c.steps = v.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "widths") c.widths = v.get<std::vector<std::size_t>>();
      else if (key == "task") c.task = parse_task(v.get<std::string>());
      else if (key == "activation") c.activation = parse_activation(v.get<std::string>());
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "teacher_bias_std") c.teacher_bias_std = v.get<double>();
      else if (key == "snapshot_every") c.snapshot_every = v.get<std::size_t>();
      else if (key == "history") c.history = v.get<std::size_t>();
      else if (key == "band") c.band = v.get<double>();
      else if (key == "eval_size") c.eval_size = v.get<std::size_t>();
      else throw Error(ErrorKind::InvalidParam, "unknown config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidParam, std::string("config value has the wrong type: ") + e.what());
  }
  if (c.granularity.kind != GranularityKind::PerGroup) c.granularity.group_size = 0;
  c.validate();
  return c;
}

double TrainReport::last_decile_mean() const {
  if (losses.empty()) return 0.0;
  const std::size_t n = std::max<std::size_t>(1, losses.size() / 10);
  double sum = 0.0;
  for (std::size_t i = losses.size() - n; i < losses.size(); ++i) sum += losses[i];
  return sum / static_cast<double>(n);
}

nlohmann::json to_json(const TrainReport& r) {
  nlohmann::json snaps = nlohmann::json::array();
  for (const auto& s : r.snapshots) {
    snaps.push_back({{"step", s.step},
                     {"loss", s.loss},
                     {"deadzone_fraction", s.deadzone_fraction},
                     {"boundary_fraction", s.boundary_fraction},
                     {"mean_flip_rate", s.mean_flip_rate}});
  }
  return {{"format", "tequila-train-report"},
          {"version", 1},
          {"config", to_json(r.config)},
          {"losses", r.losses},
          {"initial_eval_loss", r.initial_eval_loss},
          {"final_eval_loss", r.final_eval_loss},
          {"last_decile_mean", r.last_decile_mean()},
          {"diverged", r.diverged},
          {"divergence_step", r.divergence_step},
          {"message", r.message},
          {"snapshots", snaps},
          {"trap_report", {{"csv", "trap.csv"}, {"json", "trap.json"}}}};
}

std::vector<QuantLinearLayer> make_student(const TrainConfig& config) {
  config.validate();
  const auto widths = effective_widths(config);
  auto rng = make_rng(config.seed, kStudent);
  LayerOptions opts{config.granularity, config.lambda, config.epsilon};
  std::vector<QuantLinearLayer> layers;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const double std = 1.0 / std::sqrt(static_cast<double>(widths[l]));
    layers.emplace_back(gaussian(widths[l + 1], widths[l], std, rng), config.scheme, opts);
  }
  return layers;
}

TrainReport train_toy(const TrainConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainReport report;
  report.config = config;
  const TaskData task(config);
  Student student(make_student(config), config.activation);
  auto& layers = student.layers();
  std::vector<LayerOptimizer> opt(layers.size());
  const AdamConfig adam{config.learning_rate};

  auto data_rng = make_rng(config.seed, kData);
  auto eval_rng = make_rng(config.seed, kEval);
  const Batch eval = task.sample(config.eval_size, eval_rng);
  auto eval_loss = [&] {
    const double loss = task.loss(student.forward(eval.x), eval, nullptr);
    for (auto& l : layers) l.discard_cache();
    return loss;
  };
  report.initial_eval_loss = eval_loss();

  CodeHistory history(config.history);
  for (std::size_t step = 0; step <= config.steps; ++step) {
    const Batch batch = task.sample(config.batch_size, data_rng);
    Matrix grad;
    const double loss = task.loss(student.forward(batch.x), batch, &grad);
    report.losses.push_back(loss);
    history.push(current_codes(layers));
    if (step % config.snapshot_every == 0 || step == config.steps) {
      report.snapshots.push_back(snapshot(step, loss, layers, history, config));
    }
    if (!std::isfinite(loss)) {
      report.diverged = true;
      report.divergence_step = step;
      report.message = "non-finite loss at step " + std::to_string(step);
      if (report.snapshots.back().step != step) report.snapshots.push_back(snapshot(step, loss, layers, history, config));
      break;
    }
    if (step == config.steps) break;
    try {
      auto grads = student.backward(grad);
      for (std::size_t l = 0; l < layers.size(); ++l) {
        optimizer_step(layers[l].shadow_weights().values(), grads[l].grad_w.values(), opt[l].weights, adam);
        if (!grads[l].grad_alpha.empty()) {
          optimizer_step(layers[l].learnable_alpha(), grads[l].grad_alpha, opt[l].alpha, adam);
        }
        if (!grads[l].grad_b.empty()) {
          optimizer_step(layers[l].learnable_b(), grads[l].grad_b, opt[l].offsets, adam);
        }
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::GradientError) throw;
      report.diverged = true;
      report.divergence_step = step;
      report.message = e.what();
      break;
    }
  }
  for (auto& l : layers) l.discard_cache();
  report.final_eval_loss = report.diverged ? std::nan("") : eval_loss();
  for (const auto& l : layers) {
    report.layers.push_back({l.shadow_weights(), l.learnable_alpha(), l.frozen_delta(), l.learnable_b()});
  }
  report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace tequila
