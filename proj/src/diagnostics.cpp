#include "tequila/diagnostics.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>

#include <json.hpp>

#include "tequila/error.hpp"
#include "tequila/io.hpp"

namespace tequila {

namespace {

void check_shapes(const WeightMatrix& w, const QuantizedTensor& q) {
  if (w.rows() != q.rows || w.cols() != q.cols) {
    throw Error(ErrorKind::InvalidShape, "weights and quantized tensor shapes differ");
  }
}

// Calls f(w, delta) for every element with its group's threshold.
template <typename F>
void for_each_with_delta(const WeightMatrix& w, const QuantizedTensor& q, F&& f) {
  check_shapes(w, q);
  const GroupLayout layout = q.layout();
  for (std::size_t r = 0; r < q.rows; ++r) {
    for (std::size_t k = 0; k < layout.spans_per_row(); ++k) {
      const double delta = q.thresholds[layout.group_of_span(r, k)];
      for (std::size_t c = layout.span_begin(k); c < layout.span_end(k); ++c) f(w(r, c), delta);
    }
  }
}

void bin_value(Histogram& h, double v) {
  const std::size_t bins = h.counts.size();
  if (v < -kHistogramRange) {
    ++h.underflow;
  } else if (v > kHistogramRange) {
    ++h.overflow;
  } else {
    auto idx = static_cast<std::size_t>((v + kHistogramRange) / (2.0 * kHistogramRange) *
                                        static_cast<double>(bins));
    ++h.counts[std::min(idx, bins - 1)];
  }
}

nlohmann::json histogram_to_json(const Histogram& h) {
  return {{"normalized", h.normalized}, {"edges", h.edges},       {"counts", h.counts},
          {"underflow", h.underflow},   {"overflow", h.overflow}};
}

Histogram histogram_from_json(const nlohmann::json& j) {
  Histogram h;
  h.normalized = j.at("normalized").get<bool>();
  h.edges = j.at("edges").get<std::vector<double>>();
  h.counts = j.at("counts").get<std::vector<std::uint64_t>>();
  h.underflow = j.at("underflow").get<std::uint64_t>();
  h.overflow = j.at("overflow").get<std::uint64_t>();
  return h;
}

}  // namespace

std::uint64_t Histogram::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}) + underflow + overflow;
}

void Histogram::merge(const Histogram& other) {
  if (other.counts.size() != counts.size()) {
    throw Error(ErrorKind::InvalidShape, "cannot merge histograms with different bin counts");
  }
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  underflow += other.underflow;
  overflow += other.overflow;
  normalized = normalized && other.normalized;
}

CodeHistory::CodeHistory(std::size_t capacity) : capacity_(capacity) {
  if (capacity < 2) throw Error(ErrorKind::InvalidParam, "code history needs capacity >= 2");
}

void CodeHistory::push(std::vector<std::int8_t> codes) {
  if (!snapshots_.empty() && snapshots_.front().size() != codes.size()) {
    throw Error(ErrorKind::InvalidShape, "code snapshot size changed");
  }
  snapshots_.push_back(std::move(codes));
  if (snapshots_.size() > capacity_) snapshots_.pop_front();
}

std::size_t deadzone_count(const WeightMatrix& w, const QuantizedTensor& q) {
  std::size_t n = 0;
  for_each_with_delta(w, q, [&](double v, double delta) { n += std::fabs(v) < delta; });
  return n;
}

std::size_t boundary_count(const WeightMatrix& w, const QuantizedTensor& q, double band) {
  if (!(band > 0.0 && band < 1.0)) throw Error(ErrorKind::InvalidParam, "band must be in (0, 1)");
  std::size_t n = 0;
  for_each_with_delta(w, q, [&](double v, double delta) {
    const double a = std::fabs(v);
    n += a >= (1.0 - band) * delta && a <= (1.0 + band) * delta;
  });
  return n;
}

double deadzone_fraction(const WeightMatrix& w, const QuantizedTensor& q) {
  return static_cast<double>(deadzone_count(w, q)) / static_cast<double>(w.size());
}

double boundary_fraction(const WeightMatrix& w, const QuantizedTensor& q, double band) {
  return static_cast<double>(boundary_count(w, q, band)) / static_cast<double>(w.size());
}

double flip_rate(const CodeHistory& history) {
  const auto& snaps = history.snapshots();
  if (snaps.size() < 2) {
    throw Error(ErrorKind::InsufficientHistory, "flip rate needs at least two snapshots");
  }
  const std::size_t n = snaps.front().size();
  if (n == 0) return 0.0;
  std::uint64_t flips = 0;
  for (std::size_t s = 1; s < snaps.size(); ++s) {
    for (std::size_t i = 0; i < n; ++i) flips += snaps[s][i] != snaps[s - 1][i];
  }
  return static_cast<double>(flips) /
         (static_cast<double>(n) * static_cast<double>(snaps.size() - 1));
}

Histogram empty_histogram(std::size_t bins) {
  if (bins < 2) throw Error(ErrorKind::InvalidParam, "histogram needs >= 2 bins");
  Histogram h;
  h.edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) {
    h.edges[i] = -kHistogramRange + 2.0 * kHistogramRange * static_cast<double>(i) /
                                        static_cast<double>(bins);
  }
  h.counts.assign(bins, 0);
  return h;
}

Histogram weight_histogram(const WeightMatrix& w, const QuantizedTensor& q, std::size_t bins) {
  Histogram h = empty_histogram(bins);
  check_shapes(w, q);
  const bool degenerate =
      std::all_of(q.thresholds.begin(), q.thresholds.end(), [](double d) { return d == 0.0; });
  if (degenerate) {
    h.normalized = false;
    for (double v : w.values()) bin_value(h, v);
    return h;
  }
  for_each_with_delta(w, q, [&](double v, double delta) {
    double x = 0.0;
    if (delta > 0.0) {
      x = v / delta;
    } else if (v != 0.0) {
      x = std::copysign(std::numeric_limits<double>::infinity(), v);
    }
    bin_value(h, x);
  });
  return h;
}

ReportPaths export_report(const std::vector<TrapReport>& reports, const std::filesystem::path& stem) {
  if (reports.empty()) throw Error(ErrorKind::InvalidParam, "no trap reports to export");
  ReportPaths paths{stem, stem};
  paths.csv += ".csv";
  paths.json += ".json";

  std::ofstream csv(paths.csv, std::ios::binary);
  if (!csv) throw Error(ErrorKind::IoError, "cannot write " + paths.csv.string());
  csv << "step,loss,deadzone_fraction,boundary_fraction,mean_flip_rate\n";
  for (const auto& r : reports) {
    csv << r.step << ',' << format_double(r.loss) << ',' << format_double(r.deadzone_fraction)
        << ',' << format_double(r.boundary_fraction) << ',' << format_double(r.mean_flip_rate)
        << '\n';
  }
  if (!csv.flush()) throw Error(ErrorKind::IoError, "write failed for " + paths.csv.string());

  nlohmann::json j;
  j["format"] = "tequila-trap-report";
  j["version"] = 1;
  auto& arr = j["reports"] = nlohmann::json::array();
  for (const auto& r : reports) {
    arr.push_back({{"step", r.step},
                   {"loss", r.loss},
                   {"deadzone_fraction", r.deadzone_fraction},
                   {"boundary_fraction", r.boundary_fraction},
                   {"band", r.band},
                   {"mean_flip_rate", r.mean_flip_rate},
                   {"histogram", histogram_to_json(r.histogram)}});
  }
  write_json_file(j, paths.json);
  return paths;
}

std::vector<TrapReport> read_report(const ReportPaths& paths) {
  const nlohmann::json j = read_json_file(paths.json);
  if (j.value("format", "") != "tequila-trap-report") {
    throw Error(ErrorKind::FormatError, paths.json.string() + " is not a trap report");
  }
  std::vector<TrapReport> reports;
  try {
    for (const auto& e : j.at("reports")) {
      TrapReport r;
      r.step = e.at("step").get<std::uint64_t>();
      r.loss = e.at("loss").get<double>();
      r.deadzone_fraction = e.at("deadzone_fraction").get<double>();
      r.boundary_fraction = e.at("boundary_fraction").get<double>();
      r.band = e.at("band").get<double>();
      r.mean_flip_rate = e.at("mean_flip_rate").get<double>();
      r.histogram = histogram_from_json(e.at("histogram"));
      reports.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::FormatError, paths.json.string() + ": " + e.what());
  }

  // The CSV carries the scalar series; it must agree with the JSON.
  const auto rows = read_csv_rows(paths.csv);
  if (rows.size() != reports.size() + 1) {
    throw Error(ErrorKind::FormatError, paths.csv.string() + " row count disagrees with JSON");
  }
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& row = rows[i + 1];
    const auto& r = reports[i];
    if (row.size() != 5 || parse_double(row[0]) != static_cast<double>(r.step) ||
        parse_double(row[1]) != r.loss || parse_double(row[2]) != r.deadzone_fraction ||
        parse_double(row[3]) != r.boundary_fraction || parse_double(row[4]) != r.mean_flip_rate) {
      throw Error(ErrorKind::FormatError, paths.csv.string() + " row " + std::to_string(i + 1) +
                                              " disagrees with JSON");
    }
  }
  return reports;
}

}  // namespace tequila
