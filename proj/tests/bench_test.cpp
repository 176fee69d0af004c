#include "vrwkv/bench.hpp"
#include "vrwkv/memory.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace vrwkv;
using namespace vrwkv::bench;

namespace {

SuiteConfig single(Mechanism m, Index size) {
  SuiteConfig c;
  c.mechanisms = {m};
  c.sizes = {size};
  return c;
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("vrwkv_bench_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

BenchRecord record(const std::string& mech, Index size, std::int64_t ns) {
  return {mech, size, 32, 5, ns, ns / 3, ns - ns / 3, 10 * size, false};
}

}  // namespace

TEST(RunBenchmark, OneMechanismOneSizeGivesOneRecord) {
  const auto records = run_benchmark(single(Mechanism::scan, 64));
  ASSERT_EQ(records.size(), 1u);
  EXPECT_EQ(records[0].mechanism, "scan");
  EXPECT_EQ(records[0].repeats, 5);
  EXPECT_FALSE(records[0].skipped);
  EXPECT_GT(records[0].median_ns, 0);
  EXPECT_GT(records[0].peak_elems, 0);
}

TEST(RunBenchmark, ScanFasterThanDirectAtThousandTokens) {
  SuiteConfig c = single(Mechanism::scan, 1024);
  c.mechanisms.push_back(Mechanism::direct);
  const auto records = run_benchmark(c);
  ASSERT_EQ(records.size(), 2u);
  EXPECT_LT(records[0].median_ns, records[1].median_ns);
}

TEST(RunBenchmark, SizeOverBudgetIsSkipped) {
  SuiteConfig c = single(Mechanism::direct, 128);
  c.sizes = {16, 128};
  c.element_budget = analytic_elements(Mechanism::direct, 16, c);
  const auto records = run_benchmark(c);
  ASSERT_EQ(records.size(), 2u);
  EXPECT_FALSE(records[0].skipped);
  EXPECT_TRUE(records[1].skipped);
  EXPECT_EQ(records[1].median_ns, 0);
}

TEST(RunBenchmark, DeterministicCountsWithoutTiming) {
  SuiteConfig c = single(Mechanism::softmax, 32);
  c.mechanisms = {Mechanism::scan, Mechanism::softmax, Mechanism::sparse_wkv, Mechanism::windowed, Mechanism::aft,
                  Mechanism::block};
  c.sizes = {16, 32};
  c.timing = false;
  const auto a = run_benchmark(c);
  EXPECT_EQ(a, run_benchmark(c));
  ASSERT_EQ(a.size(), 12u);
  for (const auto& r : a) EXPECT_EQ(r.median_ns, 0);
}

TEST(SuiteConfig, Validation) {
  SuiteConfig c;
  c.repeats = 4;
  EXPECT_THROW(c.validate(), ContractError);
  c = {};
  c.warmup = 1;
  EXPECT_THROW(c.validate(), ContractError);
  c = {};
  c.sizes = {256, 256};
  EXPECT_THROW(c.validate(), ContractError);
  EXPECT_THROW(parse_mechanism("flash"), ConfigError);
  for (Mechanism m : all_mechanisms()) EXPECT_EQ(parse_mechanism(mechanism_name(m)), m);
}

TEST(PeakMemory, NeedsAnActiveArena) {
  EXPECT_THROW(peak_memory_estimate(Mechanism::scan, 16, SuiteConfig{}), InstrumentationError);
}

TEST(PeakMemory, SoftmaxAnalyticHasScoreMatrix) {
  SuiteConfig c;
  c.d = 16;
  EXPECT_GE(analytic_elements(Mechanism::softmax, 64, c), 4096);
}

TEST(PeakMemory, ScanAnalyticIsLinearInTokens) {
  SuiteConfig c;
  c.d = 32;
  const auto a = analytic_elements(Mechanism::scan, 1000, c);
  const auto b = analytic_elements(Mechanism::scan, 2000, c);
  const auto z = analytic_elements(Mechanism::scan, 0, c);
  EXPECT_EQ(b - a, a - z);
  EXPECT_GT(z, 0);
}

TEST(PeakMemory, MeasuredWithinThreeTimesAnalytic) {
  SuiteConfig c;
  c.d = 32;
  for (Mechanism m : {Mechanism::scan, Mechanism::softmax}) {
    memory::ElementArena arena;
    memory::ArenaScope scope(arena);
    const MemoryEstimate e = peak_memory_estimate(m, 256, c);
    EXPECT_GE(e.measured, e.analytic) << mechanism_name(m);
    EXPECT_LE(e.measured, 3 * e.analytic) << mechanism_name(m);
  }
}

TEST(PeakMemory, EveryMechanismMeetsItsAnalyticCount) {
  SuiteConfig c;
  c.d = 8;
  for (Mechanism m : all_mechanisms()) {
    memory::ElementArena arena;
    memory::ArenaScope scope(arena);
    const MemoryEstimate e = peak_memory_estimate(m, 32, c);
    EXPECT_GE(e.measured, e.analytic) << mechanism_name(m);
  }
}

TEST(FitLogLog, ExactQuadratic) {
  const SlopeFit f = fit_loglog_slope({{1, 1}, {2, 4}, {4, 16}});
  EXPECT_NEAR(f.slope, 2.0, 1e-12);
  EXPECT_NEAR(f.intercept, 0.0, 1e-12);
  EXPECT_NEAR(f.r2, 1.0, 1e-12);
}

TEST(FitLogLog, ExactLinear) {
  const SlopeFit f = fit_loglog_slope({{1, 3}, {2, 6}, {4, 12}});
  EXPECT_NEAR(f.slope, 1.0, 1e-12);
  EXPECT_NEAR(f.intercept, std::log(3.0), 1e-12);
}

TEST(FitLogLog, HandComputedGolden) {
  const SlopeFit f = fit_loglog_slope({{1, 1}, {2, 2}, {4, 5}});
  EXPECT_NEAR(f.slope, 1.1609640474436811739, 1e-12);
  EXPECT_NEAR(f.intercept, -0.037190591885701625961, 1e-12);
  EXPECT_NEAR(f.r2, 0.99363314380320574079, 1e-12);
}

TEST(FitLogLog, Errors) {
  EXPECT_THROW(fit_loglog_slope({{1, 1}, {2, 2}}), ContractError);
  EXPECT_THROW(fit_loglog_slope({{1, 1}, {2, 0}, {4, 5}}), ContractError);
  EXPECT_THROW(fit_loglog_slope({{-1, 1}, {2, 2}, {4, 5}}), ContractError);
  EXPECT_THROW(fit_loglog_slope({{2, 1}, {2, 2}, {2, 5}}), ContractError);
}

TEST(ScalingReport, SlopesRatiosAndChecks) {
  std::vector<BenchRecord> records;
  for (Index t : {256, 512, 1024, 2048, 4096}) {
    const auto scan_ns = static_cast<std::int64_t>(t) * 1000;
    records.push_back({"scan", t, 32, 5, scan_ns, 0, 0, 4 * t * 32, false});
    records.push_back({"softmax", t, 32, 5, scan_ns * t / 64, 0, 0, 2 * t * t, false});
  }
  const ScalingReport report = scaling_report(records);
  EXPECT_NEAR(report.time_slopes.at("scan").slope, 1.0, 1e-12);
  EXPECT_NEAR(report.time_slopes.at("softmax").slope, 2.0, 1e-12);
  EXPECT_NEAR(report.memory_slopes.at("softmax").slope, 2.0, 1e-12);
  ASSERT_EQ(report.speedups.at("softmax/scan").size(), 5u);
  EXPECT_NEAR(report.speedups.at("softmax/scan").back().value, 64.0, 1e-12);
  EXPECT_NEAR(report.memory_ratios.at("softmax/scan").back().value, 64.0, 1e-12);
  EXPECT_TRUE(report.warnings.empty());
  for (const auto& check : check_scaling(report)) EXPECT_TRUE(check.pass) << check.name;

  records.erase(records.begin() + 6, records.end());
  EXPECT_FALSE(scaling_report(records).warnings.empty());
}

TEST(ScalingReport, FlatSoftmaxFailsItsCheck) {
  std::vector<BenchRecord> records;
  for (Index t : {256, 512, 1024, 2048, 4096}) {
    records.push_back({"scan", t, 32, 5, t * 10, 0, 0, t, false});
    records.push_back({"softmax", t, 32, 5, t * 20, 0, 0, t * t, false});
  }
  bool failed = false;
  for (const auto& check : check_scaling(scaling_report(records))) {
    if (check.name.find("time_slope[softmax]") != std::string::npos) failed = !check.pass;
  }
  EXPECT_TRUE(failed);
}

TEST(EmitReport, OneRecordCsvHasTwoLines) {
  const auto dir = scratch_dir("csv");
  const auto files = emit_report({record("scan", 256, 900)}, ReportFormat::csv, dir / "r.csv");
  ASSERT_EQ(files.size(), 1u);
  const auto lines = read_lines(files[0]);
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0], "mechanism,size,d,repeats,median_ns,fwd_ns,bwd_ns,peak_elems,skipped");
  EXPECT_EQ(lines[1], "scan,256,32,5,900,300,600,2560,false");
}

TEST(EmitReport, MetadataLinesArePrefixed) {
  const std::string csv = records_to_csv({record("scan", 8, 9)}, {{"seed", "3"}});
  EXPECT_EQ(csv.substr(0, 10), "# seed: 3\n");
}

TEST(EmitReport, JsonRoundTrips) {
  std::vector<BenchRecord> records = {record("scan", 256, 900), record("softmax", 512, 123456789012)};
  records[1].skipped = true;
  EXPECT_EQ(records_from_json(records_to_json(records, {{"seed", "1"}})), records);
  const auto dir = scratch_dir("json");
  const auto files = emit_report(records, ReportFormat::json, dir / "r.json");
  std::ifstream in(files[0]);
  std::stringstream text;
  text << in.rdbuf();
  EXPECT_EQ(records_from_json(text.str()), records);
}

TEST(EmitReport, PlotdataOneFilePerMechanism) {
  std::vector<BenchRecord> records;
  for (Index t : {16, 32, 64}) {
    records.push_back(record("scan", t, 10 * t));
    records.push_back(record("direct", t, t * t));
  }
  const auto dir = scratch_dir("plot");
  const auto files = emit_report(records, ReportFormat::plotdata, dir / "series");
  ASSERT_EQ(files.size(), 2u);
  for (const auto& f : files) {
    const auto lines = read_lines(f);
    ASSERT_EQ(lines.size(), 3u) << f;
    EXPECT_EQ(lines[0].find(','), std::string::npos);
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "series" / "scan.dat"));
}

TEST(EmitReport, Errors) {
  EXPECT_THROW(emit_report({}, ReportFormat::csv, scratch_dir("empty") / "r.csv"), EmptyInputError);
  EXPECT_THROW(emit_report({record("scan", 1, 1)}, ReportFormat::csv, "/proc/vrwkv/nowhere.csv"), IoError);
  EXPECT_THROW(parse_format("xml"), ConfigError);
  EXPECT_EQ(parse_format("plotdata"), ReportFormat::plotdata);
}
