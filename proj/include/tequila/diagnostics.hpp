#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <vector>

#include "tequila/quantizer.hpp"

namespace tequila {

inline constexpr double kDefaultBand = 0.1;
inline constexpr std::size_t kDefaultHistogramBins = 120;
inline constexpr double kHistogramRange = 3.0;
inline constexpr std::size_t kDefaultSnapshotEvery = 50;
inline constexpr std::size_t kDefaultHistoryLength = 8;

/// Histogram of w / delta over [-3, 3]. Values outside the range land in
/// the underflow/overflow counters. When every delta is zero the raw values
/// are binned instead and `normalized` is false.
struct Histogram {
  std::vector<double> edges;  // bins + 1, strictly increasing
  std::vector<std::uint64_t> counts;
  std::uint64_t underflow = 0;
  std::uint64_t overflow = 0;
  bool normalized = true;

  std::uint64_t total() const;
  void merge(const Histogram& other);

  friend bool operator==(const Histogram&, const Histogram&) = default;
};

struct TrapReport {
  std::uint64_t step = 0;
  double loss = 0.0;
  double deadzone_fraction = 0.0;
  double boundary_fraction = 0.0;
  double band = kDefaultBand;
  double mean_flip_rate = 0.0;  // 0 until two code snapshots exist
  Histogram histogram;

  friend bool operator==(const TrapReport&, const TrapReport&) = default;
};

/// Ring buffer of the last `capacity` code snapshots of the monitored weights.
class CodeHistory {
 public:
  explicit CodeHistory(std::size_t capacity = kDefaultHistoryLength);

  void push(std::vector<std::int8_t> codes);
  std::size_t size() const noexcept { return snapshots_.size(); }
  std::size_t capacity() const noexcept { return capacity_; }
  const std::deque<std::vector<std::int8_t>>& snapshots() const noexcept { return snapshots_; }

 private:
  std::size_t capacity_;
  std::deque<std::vector<std::int8_t>> snapshots_;
};

std::size_t deadzone_count(const WeightMatrix& w, const QuantizedTensor& q);
std::size_t boundary_count(const WeightMatrix& w, const QuantizedTensor& q, double band);

double deadzone_fraction(const WeightMatrix& w, const QuantizedTensor& q);
/// Share of weights with |w| in [(1 - band) delta, (1 + band) delta].
double boundary_fraction(const WeightMatrix& w, const QuantizedTensor& q, double band = kDefaultBand);

double flip_rate(const CodeHistory& history);

Histogram empty_histogram(std::size_t bins = kDefaultHistogramBins);
Histogram weight_histogram(const WeightMatrix& w, const QuantizedTensor& q,
                           std::size_t bins = kDefaultHistogramBins);

struct ReportPaths {
  std::filesystem::path csv;
  std::filesystem::path json;
};

/// Writes `<stem>.csv` (scalar series) and `<stem>.json` (full reports with
/// histograms) next to each other.
ReportPaths export_report(const std::vector<TrapReport>& reports, const std::filesystem::path& stem);
std::vector<TrapReport> read_report(const ReportPaths& paths);

}  // namespace tequila
