#include "vrwkv/bench.hpp"

#include "vrwkv/attention.hpp"
#include "vrwkv/block.hpp"
#include "vrwkv/memory.hpp"
#include "vrwkv/rng.hpp"
#include "vrwkv/wkv.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <new>
#include <optional>
#include <sstream>
#include <tuple>

namespace vrwkv::bench {

namespace {

using memory::CountedMatrix;

const std::vector<std::pair<Mechanism, std::string>>& names() {
  static const std::vector<std::pair<Mechanism, std::string>> table{
      {Mechanism::scan, "scan"},
      {Mechanism::direct, "direct"},
      {Mechanism::softmax, "softmax"},
      {Mechanism::sparse_causal, "sparse_causal"},
      {Mechanism::sparse_wkv, "sparse_wkv"},
      {Mechanism::windowed, "windowed"},
      {Mechanism::windowed_sqrt, "windowed_sqrt"},
      {Mechanism::aft, "aft"},
      {Mechanism::block, "block"},
  };
  return table;
}

bool is_sparse(Mechanism m) { return m == Mechanism::sparse_causal || m == Mechanism::sparse_wkv; }

Index window_for(Mechanism m, Index tokens, const SuiteConfig& config) {
  if (m == Mechanism::windowed_sqrt) {
    return std::clamp<Index>(static_cast<Index>(std::llround(std::sqrt(static_cast<double>(tokens)))), 1, tokens);
  }
  return std::clamp<Index>(config.window, 1, tokens);
}

PatchGrid square_grid(Index tokens) {
  Index rows = static_cast<Index>(std::sqrt(static_cast<double>(tokens)));
  while (rows > 1 && tokens % rows != 0) --rows;
  return {rows, tokens / rows};
}

CountedMatrix<double> uniform_input(Rng& rng, Index rows, Index cols, double lo, double hi) {
  CountedMatrix<double> m(rows, cols);
  for (Index i = 0; i < m->size(); ++i) m->data()[i] = lo + (hi - lo) * rng.uniform();
  return m;
}

/// One mechanism at one size: inputs, a forward closure, and an optional
/// backward closure.
struct Workload {
  std::function<void()> forward;
  std::function<void()> backward;
};

struct Inputs {
  CountedMatrix<double> a, b, c, g;
  WkvParams<double> wkv;
  std::optional<SoftmaxAttention<double>> saved;
  VrwkvBlockParams block;
};

Workload make_workload(Mechanism m, Index size, const SuiteConfig& config) {
  Rng rng(config.seed);
  auto in = std::make_shared<Inputs>();
  const Index d = config.d;
  const Index tokens = is_sparse(m) ? size * config.frames : size;
  in->wkv.decay = Vector(d);
  in->wkv.bonus = Vector(d);
  for (Index j = 0; j < d; ++j) in->wkv.decay(j) = rng.uniform();
  for (Index j = 0; j < d; ++j) in->wkv.bonus(j) = rng.uniform() - 0.5;
  Workload w;
  switch (m) {
    case Mechanism::scan:
    case Mechanism::direct: {
      in->a = uniform_input(rng, tokens, d, -3, 3);
      in->b = uniform_input(rng, tokens, d, -3, 3);
      in->g = uniform_input(rng, tokens, d, -1, 1);
      if (m == Mechanism::scan) {
        w.forward = [in] { bi_wkv_scan(*in->a, *in->b, in->wkv); };
        w.backward = [in] { bi_wkv_backward(*in->a, *in->b, in->wkv, *in->g); };
      } else {
        w.forward = [in] { bi_wkv_direct(*in->a, *in->b, in->wkv); };
        w.backward = [in] { bi_wkv_direct_backward(*in->a, *in->b, in->wkv, *in->g); };
      }
      break;
    }
    case Mechanism::softmax: {
      in->a = uniform_input(rng, tokens, d, -1, 1);
      in->b = uniform_input(rng, tokens, d, -1, 1);
      in->c = uniform_input(rng, tokens, d, -1, 1);
      in->g = uniform_input(rng, tokens, d, -1, 1);
      w.forward = [in] { in->saved = softmax_attention_forward(*in->a, *in->b, *in->c, true); };
      w.backward = [in] {
        softmax_attention_backward(*in->a, *in->b, *in->c, *in->saved->probs, *in->g, true);
        in->saved.reset();
      };
      break;
    }
    case Mechanism::sparse_causal:
    case Mechanism::sparse_wkv: {
      const Index frames = config.frames;
      in->a = uniform_input(rng, tokens, d, -1, 1);
      in->g = uniform_input(rng, tokens, d, -1, 1);
      if (m == Mechanism::sparse_causal) {
        w.forward = [in, frames] { sparse_causal_attention(*in->a, frames); };
        w.backward = [in, frames] { sparse_causal_attention_backward(*in->a, frames, *in->g); };
      } else {
        w.forward = [in, frames] { sparse_wkv_attention(*in->a, frames, in->wkv); };
        w.backward = [in, frames] { sparse_wkv_attention_backward(*in->a, frames, in->wkv, *in->g); };
      }
      break;
    }
    case Mechanism::windowed:
    case Mechanism::windowed_sqrt: {
      const Index window = window_for(m, tokens, config);
      in->a = uniform_input(rng, tokens, d, -1, 1);
      in->b = uniform_input(rng, tokens, d, -1, 1);
      in->c = uniform_input(rng, tokens, d, -1, 1);
      in->g = uniform_input(rng, tokens, d, -1, 1);
      w.forward = [in, window] { windowed_attention(*in->a, *in->b, *in->c, window); };
      w.backward = [in, window] { windowed_attention_backward(*in->a, *in->b, *in->c, window, *in->g); };
      break;
    }
    case Mechanism::aft: {
      in->a = uniform_input(rng, tokens, d, -1, 1);
      in->b = uniform_input(rng, tokens, d, -1, 1);
      in->c = CountedMatrix<double>(tokens, tokens);
      *in->c = time_decay_bias<double>(tokens, 1.0 / static_cast<double>(tokens));
      w.forward = [in] { aft_attention(*in->a, *in->b, *in->c); };
      break;
    }
    case Mechanism::block: {
      const FrameLayout layout{1, square_grid(tokens)};
      in->a = uniform_input(rng, tokens, d, -1, 1);
      in->block = VrwkvBlockParams::init(d, rng.bits());
      w.forward = [in, layout] { block_forward(*in->a, layout, in->block); };
      break;
    }
  }
  return w;
}

std::int64_t median(std::vector<std::int64_t> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
}

std::int64_t elapsed_ns(const std::function<void()>& f) {
  if (!f) return 0;
  const auto start = std::chrono::steady_clock::now();
  f();
  const auto stop = std::chrono::steady_clock::now();
  return std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start).count();
}

std::vector<std::pair<double, double>> series(const std::vector<BenchRecord>& records, const std::string& mechanism,
                                              bool memory) {
  std::vector<std::pair<double, double>> out;
  for (const auto& r : records) {
    if (r.mechanism != mechanism || r.skipped) continue;
    const double y = memory ? static_cast<double>(r.peak_elems) : static_cast<double>(r.median_ns);
    if (y > 0) out.emplace_back(static_cast<double>(r.size), y);
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("report: cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("report: write to " + path.string() + " failed");
}

nlohmann::json to_json(const BenchRecord& r) {
  return {{"mechanism", r.mechanism}, {"size", r.size},         {"d", r.d},
          {"repeats", r.repeats},     {"median_ns", r.median_ns}, {"fwd_ns", r.fwd_ns},
          {"bwd_ns", r.bwd_ns},       {"peak_elems", r.peak_elems}, {"skipped", r.skipped}};
}

}  // namespace

std::string mechanism_name(Mechanism m) {
  for (const auto& [mech, name] : names()) {
    if (mech == m) return name;
  }
  throw ConfigError("bench: unknown mechanism");
}

Mechanism parse_mechanism(const std::string& name) {
  for (const auto& [mech, n] : names()) {
    if (n == name) return mech;
  }
  throw ConfigError("bench: unknown mechanism '" + name + "'");
}

std::vector<Mechanism> all_mechanisms() {
  std::vector<Mechanism> out;
  for (const auto& entry : names()) out.push_back(entry.first);
  return out;
}

void SuiteConfig::validate() const {
  if (mechanisms.empty()) throw ConfigError("bench: no mechanisms selected");
  if (sizes.empty()) throw ConfigError("bench: no sizes selected");
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] < 1) throw ConfigError("bench: sizes must be positive");
    if (i > 0 && sizes[i] <= sizes[i - 1]) throw ContractError("bench: sizes must be strictly increasing");
  }
  if (repeats < 5) throw ContractError("bench: at least 5 repeats are required");
  if (warmup < 2) throw ContractError("bench: at least 2 warmup runs are required");
  if (d < 1 || frames < 1 || window < 1 || element_budget < 0) throw ConfigError("bench: bad suite parameters");
}

std::int64_t analytic_elements(Mechanism m, Index size, const SuiteConfig& config) {
  const std::int64_t d = config.d;
  const std::int64_t n = size;
  const std::int64_t t = is_sparse(m) ? n * config.frames : n;
  switch (m) {
    case Mechanism::scan:
    case Mechanism::direct:
      return 2 * t * d + 2 * d;
    case Mechanism::softmax:
      return 2 * t * t + t * d;
    case Mechanism::sparse_causal:
      return t * d + (config.frames > 1 ? 4 * n * n : 2 * n * n);
    case Mechanism::sparse_wkv:
      return t * d + 2 * n * d;
    case Mechanism::windowed:
    case Mechanism::windowed_sqrt: {
      const std::int64_t window = window_for(m, static_cast<Index>(t), config);
      return 2 * window * window + 3 * t * d;
    }
    case Mechanism::aft:
    case Mechanism::block:
      return 2 * t * d;
  }
  return 0;
}

MemoryEstimate peak_memory_estimate(Mechanism m, Index size, const SuiteConfig& config) {
  std::int64_t baseline = 0;
  memory::ElementArena& arena = memory::require_arena();
  {
    Workload w = make_workload(m, size, config);
    baseline = arena.live();
    arena.reset_peak();
    w.forward();
    if (w.backward) w.backward();
  }
  MemoryEstimate estimate{arena.peak() - baseline, analytic_elements(m, size, config)};
  if (estimate.measured < estimate.analytic) {
    throw InstrumentationError("bench: " + mechanism_name(m) + " at size " + std::to_string(size) + " measured " +
                               std::to_string(estimate.measured) + " elements, below the analytic " +
                               std::to_string(estimate.analytic));
  }
  return estimate;
}

std::vector<BenchRecord> run_benchmark(const SuiteConfig& config) {
  config.validate();
  std::vector<BenchRecord> records;
  for (Mechanism m : config.mechanisms) {
    for (Index size : config.sizes) {
      BenchRecord rec;
      rec.mechanism = mechanism_name(m);
      rec.size = size;
      rec.d = config.d;
      rec.repeats = config.repeats;
      if (config.element_budget > 0 && analytic_elements(m, size, config) > config.element_budget) {
        rec.skipped = true;
        records.push_back(rec);
        continue;
      }
      try {
        {
          memory::ElementArena arena;
          memory::ArenaScope scope(arena);
          rec.peak_elems = peak_memory_estimate(m, size, config).measured;
        }
        if (config.timing) {
          Workload w = make_workload(m, size, config);
          for (Index i = 0; i < config.warmup; ++i) {
            w.forward();
            if (w.backward) w.backward();
          }
          std::vector<std::int64_t> fwd, bwd, total;
          for (Index i = 0; i < config.repeats; ++i) {
            fwd.push_back(elapsed_ns(w.forward));
            bwd.push_back(elapsed_ns(w.backward));
            total.push_back(fwd.back() + bwd.back());
          }
          rec.median_ns = median(total);
          rec.fwd_ns = median(fwd);
          rec.bwd_ns = median(bwd);
        }
      } catch (const std::bad_alloc&) {
        rec = BenchRecord{rec.mechanism, size, config.d, config.repeats, 0, 0, 0, 0, true};
      }
      records.push_back(rec);
    }
  }
  return records;
}

SlopeFit fit_loglog_slope(const std::vector<std::pair<double, double>>& points) {
  if (points.size() < 3) throw ContractError("fit_loglog_slope: need at least 3 points");
  double sx = 0, sy = 0;
  for (const auto& [x, y] : points) {
    if (!(x > 0) || !(y > 0)) throw ContractError("fit_loglog_slope: values must be positive");
    sx += std::log(x);
    sy += std::log(y);
  }
  const double n = static_cast<double>(points.size());
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (const auto& [x, y] : points) {
    const double dx = std::log(x) - mx, dy = std::log(y) - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (sxx == 0) throw ContractError("fit_loglog_slope: all sizes are equal");
  SlopeFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.r2 = syy == 0 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return fit;
}

ScalingReport scaling_report(const std::vector<BenchRecord>& records) {
  ScalingReport report;
  std::vector<std::string> order;
  for (const auto& r : records) {
    if (std::find(order.begin(), order.end(), r.mechanism) == order.end()) order.push_back(r.mechanism);
  }
  for (const auto& mech : order) {
    const auto time = series(records, mech, false);
    const auto mem = series(records, mech, true);
    if (time.size() >= 3) report.time_slopes[mech] = fit_loglog_slope(time);
    if (mem.size() >= 3) report.memory_slopes[mech] = fit_loglog_slope(mem);
    const auto& pts = time.size() >= mem.size() ? time : mem;
    if (pts.size() >= 3 && (pts.size() < 4 || pts.back().first / pts.front().first < 16.0)) {
      report.warnings.push_back(mech + ": slope fitted from " + std::to_string(pts.size()) +
                                " sizes; 4 sizes over a 16x range are recommended");
    }
  }
  const auto scan_time = series(records, "scan", false);
  const auto scan_mem = series(records, "scan", true);
  for (const auto& mech : order) {
    if (mech == "scan") continue;
    for (const auto& [base, mine, target] :
         {std::tuple{&scan_time, series(records, mech, false), &report.speedups},
          std::tuple{&scan_mem, series(records, mech, true), &report.memory_ratios}}) {
      std::vector<RatioPoint> ratios;
      for (const auto& [size, value] : mine) {
        for (const auto& [scan_size, scan_value] : *base) {
          if (scan_size == size) ratios.push_back({static_cast<Index>(size), value / scan_value});
        }
      }
      if (!ratios.empty()) (*target)[mech + "/scan"] = ratios;
    }
  }
  return report;
}

std::vector<PropertyCheck> check_scaling(const ScalingReport& report) {
  std::vector<PropertyCheck> checks;
  auto slope_at_most = [&](const std::map<std::string, SlopeFit>& slopes, const std::string& mech,
                           const std::string& label, double limit) {
    if (auto it = slopes.find(mech); it != slopes.end()) {
      checks.push_back({label, it->second.slope, limit, it->second.slope <= limit});
    }
  };
  auto slope_at_least = [&](const std::map<std::string, SlopeFit>& slopes, const std::string& mech,
                            const std::string& label, double limit) {
    if (auto it = slopes.find(mech); it != slopes.end()) {
      checks.push_back({label, it->second.slope, limit, it->second.slope >= limit});
    }
  };
  slope_at_most(report.time_slopes, "scan", "time_slope[scan] <= 1.25", 1.25);
  slope_at_least(report.time_slopes, "softmax", "time_slope[softmax] >= 1.7", 1.7);
  slope_at_least(report.time_slopes, "direct", "time_slope[direct] >= 1.7", 1.7);
  if (auto it = report.speedups.find("direct/scan"); it != report.speedups.end() && it->second.size() >= 2) {
    double worst = 0.0;
    bool monotone = true;
    for (std::size_t i = 1; i < it->second.size(); ++i) {
      const double step = it->second[i].value - it->second[i - 1].value;
      worst = i == 1 ? step : std::min(worst, step);
      monotone = monotone && step >= 0.0;
    }
    checks.push_back({"speedup[direct/scan] non-decreasing (min step)", worst, 0.0, monotone});
  }
  slope_at_least(report.memory_slopes, "softmax", "memory_slope[softmax] >= 1.9", 1.9);
  slope_at_most(report.memory_slopes, "scan", "memory_slope[scan] <= 1.1", 1.1);
  if (auto it = report.memory_ratios.find("softmax/scan"); it != report.memory_ratios.end()) {
    const RatioPoint& last = it->second.back();
    checks.push_back({"memory_ratio[softmax/scan] at " + std::to_string(last.size) + " >= 2", last.value, 2.0,
                      last.value >= 2.0});
  }
  slope_at_least(report.time_slopes, "sparse_causal", "time_slope[sparse_causal] >= 1.7", 1.7);
  slope_at_most(report.time_slopes, "sparse_wkv", "time_slope[sparse_wkv] <= 1.25", 1.25);
  return checks;
}

ReportFormat parse_format(const std::string& name) {
  if (name == "csv") return ReportFormat::csv;
  if (name == "json") return ReportFormat::json;
  if (name == "plotdata") return ReportFormat::plotdata;
  throw ConfigError("report: unknown format '" + name + "'");
}

std::string records_to_csv(const std::vector<BenchRecord>& records, const Metadata& metadata) {
  std::ostringstream out;
  for (const auto& [key, value] : metadata) out << "# " << key << ": " << value << '\n';
  out << "mechanism,size,d,repeats,median_ns,fwd_ns,bwd_ns,peak_elems,skipped\n";
  for (const auto& r : records) {
    out << r.mechanism << ',' << r.size << ',' << r.d << ',' << r.repeats << ',' << r.median_ns << ',' << r.fwd_ns
        << ',' << r.bwd_ns << ',' << r.peak_elems << ',' << (r.skipped ? "true" : "false") << '\n';
  }
  return out.str();
}

std::string records_to_json(const std::vector<BenchRecord>& records, const Metadata& metadata) {
  nlohmann::json doc;
  doc["metadata"] = nlohmann::json::object();
  for (const auto& [key, value] : metadata) doc["metadata"][key] = value;
  doc["records"] = nlohmann::json::array();
  for (const auto& r : records) doc["records"].push_back(to_json(r));
  return doc.dump(2) + "\n";
}

std::vector<BenchRecord> records_from_json(const std::string& text) {
  try {
    const auto doc = nlohmann::json::parse(text);
    std::vector<BenchRecord> out;
    for (const auto& j : doc.at("records")) {
      BenchRecord r;
      r.mechanism = j.at("mechanism").get<std::string>();
      r.size = j.at("size").get<Index>();
      r.d = j.at("d").get<Index>();
      r.repeats = j.at("repeats").get<Index>();
      r.median_ns = j.at("median_ns").get<std::int64_t>();
      r.fwd_ns = j.at("fwd_ns").get<std::int64_t>();
      r.bwd_ns = j.at("bwd_ns").get<std::int64_t>();
      r.peak_elems = j.at("peak_elems").get<std::int64_t>();
      r.skipped = j.at("skipped").get<bool>();
      out.push_back(std::move(r));
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("report: bad json: ") + e.what());
  }
}

std::string scaling_report_json(const ScalingReport& report, const std::vector<PropertyCheck>& checks) {
  nlohmann::json doc;
  auto slopes = [](const std::map<std::string, SlopeFit>& m) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, f] : m) j[k] = {{"slope", f.slope}, {"intercept", f.intercept}, {"r2", f.r2}};
    return j;
  };
  auto ratios = [](const std::map<std::string, std::vector<RatioPoint>>& m) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, pts] : m) {
      j[k] = nlohmann::json::array();
      for (const auto& p : pts) j[k].push_back({{"size", p.size}, {"ratio", p.value}});
    }
    return j;
  };
  doc["time_slopes"] = slopes(report.time_slopes);
  doc["memory_slopes"] = slopes(report.memory_slopes);
  doc["speedups"] = ratios(report.speedups);
  doc["memory_ratios"] = ratios(report.memory_ratios);
  doc["warnings"] = report.warnings;
  doc["checks"] = nlohmann::json::array();
  for (const auto& c : checks) {
    doc["checks"].push_back({{"name", c.name}, {"value", c.value}, {"threshold", c.threshold}, {"pass", c.pass}});
  }
  return doc.dump(2) + "\n";
}

std::vector<std::filesystem::path> emit_report(const std::vector<BenchRecord>& records, ReportFormat format,
                                               const std::filesystem::path& path, const Metadata& metadata) {
  if (records.empty()) throw EmptyInputError("emit_report: no records");
  switch (format) {
    case ReportFormat::csv:
      write_text(path, records_to_csv(records, metadata));
      return {path};
    case ReportFormat::json:
      write_text(path, records_to_json(records, metadata));
      return {path};
    case ReportFormat::plotdata: {
      std::error_code ec;
      std::filesystem::create_directories(path, ec);
      if (ec || !std::filesystem::is_directory(path)) throw IoError("report: cannot create directory " + path.string());
      std::vector<std::string> order;
      for (const auto& r : records) {
        if (std::find(order.begin(), order.end(), r.mechanism) == order.end()) order.push_back(r.mechanism);
      }
      std::vector<std::filesystem::path> written;
      for (const auto& mech : order) {
        std::ostringstream out;
        for (const auto& r : records) {
          if (r.mechanism != mech || r.skipped) continue;
          out << r.size << ' ' << r.median_ns << ' ' << r.fwd_ns << ' ' << r.bwd_ns << ' ' << r.peak_elems << '\n';
        }
        written.push_back(path / (mech + ".dat"));
        write_text(written.back(), out.str());
      }
      return written;
    }
  }
  return {};
}

}  // namespace vrwkv::bench
