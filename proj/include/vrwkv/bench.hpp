#pragma once

#include "vrwkv/core.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace vrwkv::bench {

enum class Mechanism { scan, direct, softmax, sparse_causal, sparse_wkv, windowed, windowed_sqrt, aft, block };

std::string mechanism_name(Mechanism m);
/// Throws ConfigError for an unknown name.
Mechanism parse_mechanism(const std::string& name);
std::vector<Mechanism> all_mechanisms();

struct SuiteConfig {
  std::vector<Mechanism> mechanisms{Mechanism::scan, Mechanism::direct, Mechanism::softmax};
  /// Token count T; tokens per frame for the two sparse mechanisms.
  std::vector<Index> sizes{256, 512, 1024, 2048, 4096};
  Index d = 32;
  Index repeats = 5;
  Index warmup = 2;
  std::uint64_t seed = 0;
  /// Frames for sparse_causal / sparse_wkv.
  Index frames = 4;
  /// Window of the fixed-window mechanism, capped at T.
  Index window = 64;
  /// Sizes whose analytic element count exceeds this are skipped; 0 means no limit.
  std::int64_t element_budget = 0;
  /// Record zero times; only the element counts are measured.
  bool timing = true;

  /// Throws ContractError / ConfigError on a malformed suite.
  void validate() const;
};

struct BenchRecord {
  std::string mechanism;
  Index size = 0;
  Index d = 0;
  Index repeats = 0;
  /// Median of forward + backward per repeat, and the two phase medians.
  std::int64_t median_ns = 0;
  std::int64_t fwd_ns = 0;
  std::int64_t bwd_ns = 0;
  std::int64_t peak_elems = 0;
  bool skipped = false;

  friend bool operator==(const BenchRecord&, const BenchRecord&) = default;
};

struct MemoryEstimate {
  std::int64_t measured = 0;
  std::int64_t analytic = 0;
};

/// Closed-form element count the mechanism cannot do without during one
/// forward + backward, beyond its inputs: the gradients it returns and the
/// buffers that must coexist at the peak (for softmax, both T×T matrices).
/// block and aft count only the kernel outputs and scratch.
std::int64_t analytic_elements(Mechanism m, Index size, const SuiteConfig& config);

/// High-water mark of live elements over one forward + backward, measured
/// on the active arena after the inputs are in place, so caller-owned
/// inputs (including the upstream gradient and AFT's bias) are excluded. Throws
/// InstrumentationError when no arena is active or when the measurement
/// falls below the analytic count.
MemoryEstimate peak_memory_estimate(Mechanism m, Index size, const SuiteConfig& config);

/// Warmups, then timed repeats, for every mechanism and size in order.
/// Sizes over the element budget, or whose allocation fails, are recorded
/// as skipped.
std::vector<BenchRecord> run_benchmark(const SuiteConfig& config);

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

/// Ordinary least squares on (ln x, ln y). Needs at least three points,
/// all positive, with more than one distinct x.
SlopeFit fit_loglog_slope(const std::vector<std::pair<double, double>>& points);

struct RatioPoint {
  Index size = 0;
  double value = 0.0;
};

struct ScalingReport {
  std::map<std::string, SlopeFit> time_slopes;
  std::map<std::string, SlopeFit> memory_slopes;
  /// "<mechanism>/scan" wall-time ratios by size.
  std::map<std::string, std::vector<RatioPoint>> speedups;
  /// "<mechanism>/scan" peak element ratios by size.
  std::map<std::string, std::vector<RatioPoint>> memory_ratios;
  std::vector<std::string> warnings;
};

ScalingReport scaling_report(const std::vector<BenchRecord>& records);

struct PropertyCheck {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

/// The scaling properties that apply to the mechanisms present: scan time
/// slope ≤ 1.25, softmax and direct time slopes ≥ 1.7, direct/scan speedup
/// non-decreasing, softmax memory slope ≥ 1.9, scan memory slope ≤ 1.1,
/// softmax/scan memory ratio ≥ 2 at the largest common size, and for the
/// sparse pair sparse_causal slope ≥ 1.7 and sparse_wkv slope ≤ 1.25.
std::vector<PropertyCheck> check_scaling(const ScalingReport& report);

enum class ReportFormat { csv, json, plotdata };
ReportFormat parse_format(const std::string& name);

using Metadata = std::vector<std::pair<std::string, std::string>>;

/// Writes `records` to `path`. csv and json write one file; plotdata treats
/// `path` as a directory and writes `<mechanism>.dat` per mechanism with
/// columns size, median_ns, fwd_ns, bwd_ns, peak_elems. Returns the files written.
std::vector<std::filesystem::path> emit_report(const std::vector<BenchRecord>& records, ReportFormat format,
                                               const std::filesystem::path& path, const Metadata& metadata = {});

std::string records_to_csv(const std::vector<BenchRecord>& records, const Metadata& metadata = {});
std::string records_to_json(const std::vector<BenchRecord>& records, const Metadata& metadata = {});
std::vector<BenchRecord> records_from_json(const std::string& text);
std::string scaling_report_json(const ScalingReport& report, const std::vector<PropertyCheck>& checks);

}  // namespace vrwkv::bench
