#include "vrwkv/cli.hpp"

#include "vrwkv/bench.hpp"
#include "vrwkv/checkpoint.hpp"
#include "vrwkv/diffusion.hpp"
#include "vrwkv/verify.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

namespace vrwkv::cli {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> parts;
  std::stringstream in(value);
  for (std::string part; std::getline(in, part, ',');) {
    part = trim(part);
    if (!part.empty()) parts.push_back(part);
  }
  return parts;
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& value) {
  Int out{};
  const auto text = trim(value);
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
    throw ConfigError(key + ": expected an integer, got '" + value + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  const auto text = trim(value);
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (text.empty() || used != text.size() || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a number, got '" + value + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  const auto text = trim(value);
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

std::string normalize(std::string key) {
  std::replace(key.begin(), key.end(), '-', '_');
  return key;
}

std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"command", [](RunConfig& c, const std::string&, const std::string& v) { c.command = trim(v); }},
      {"seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = parse_int<std::uint64_t>(k, v); }},
      {"sizes",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.sizes.clear();
         for (const auto& part : split_list(v)) c.sizes.push_back(parse_int<Index>(k, part));
       }},
      {"d", [](RunConfig& c, const std::string& k, const std::string& v) { c.d = parse_int<Index>(k, v); }},
      {"mechanisms", [](RunConfig& c, const std::string&, const std::string& v) { c.mechanisms = split_list(v); }},
      {"repeats", [](RunConfig& c, const std::string& k, const std::string& v) { c.repeats = parse_int<Index>(k, v); }},
      {"warmup", [](RunConfig& c, const std::string& k, const std::string& v) { c.warmup = parse_int<Index>(k, v); }},
      {"frames", [](RunConfig& c, const std::string& k, const std::string& v) { c.frames = parse_int<Index>(k, v); }},
      {"element_budget",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.element_budget = parse_int<std::int64_t>(k, v); }},
      {"diffusion_steps",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.diffusion_steps = parse_int<Index>(k, v); }},
      {"beta_first", [](RunConfig& c, const std::string& k, const std::string& v) { c.beta_first = parse_double(k, v); }},
      {"beta_last", [](RunConfig& c, const std::string& k, const std::string& v) { c.beta_last = parse_double(k, v); }},
      {"blocks", [](RunConfig& c, const std::string& k, const std::string& v) { c.blocks = parse_int<Index>(k, v); }},
      {"patch", [](RunConfig& c, const std::string& k, const std::string& v) { c.patch = parse_int<Index>(k, v); }},
      {"steps", [](RunConfig& c, const std::string& k, const std::string& v) { c.steps = parse_int<Index>(k, v); }},
      {"batch", [](RunConfig& c, const std::string& k, const std::string& v) { c.batch = parse_int<Index>(k, v); }},
      {"lr", [](RunConfig& c, const std::string& k, const std::string& v) { c.lr = parse_double(k, v); }},
      {"p_uncond", [](RunConfig& c, const std::string& k, const std::string& v) { c.p_uncond = parse_double(k, v); }},
      {"dataset_size",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.dataset_size = parse_int<Index>(k, v); }},
      {"guidance", [](RunConfig& c, const std::string& k, const std::string& v) { c.guidance = parse_double(k, v); }},
      {"sample_steps",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.sample_steps = parse_int<Index>(k, v); }},
      {"class", [](RunConfig& c, const std::string& k, const std::string& v) { c.class_id = parse_int<int>(k, v); }},
      {"clip_x0", [](RunConfig& c, const std::string& k, const std::string& v) { c.clip_x0 = parse_bool(k, v); }},
      {"out", [](RunConfig& c, const std::string&, const std::string& v) { c.out = trim(v); }},
      {"config", [](RunConfig& c, const std::string&, const std::string& v) { c.config = trim(v); }},
      {"format", [](RunConfig& c, const std::string&, const std::string& v) { c.format = trim(v); }},
      {"filter", [](RunConfig& c, const std::string&, const std::string& v) { c.filter = trim(v); }},
      {"no_timing", [](RunConfig& c, const std::string& k, const std::string& v) { c.timing = !parse_bool(k, v); }},
      {"timing", [](RunConfig& c, const std::string& k, const std::string& v) { c.timing = parse_bool(k, v); }},
      {"perturb_scan",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.perturb_scan = parse_bool(k, v); }},
  };
  return table;
}

bench::SuiteConfig suite_from(const RunConfig& c) {
  bench::SuiteConfig s;
  s.mechanisms.clear();
  for (const auto& name : c.mechanisms) s.mechanisms.push_back(bench::parse_mechanism(name));
  s.sizes = c.sizes;
  s.d = c.d;
  s.repeats = c.repeats;
  s.warmup = c.warmup;
  s.seed = c.seed;
  s.frames = c.frames;
  s.element_budget = c.element_budget;
  s.timing = c.timing;
  return s;
}

DenoiserConfig denoiser_from(const RunConfig& c) {
  DenoiserConfig d;
  d.frames = c.frames;
  d.patch = c.patch;
  d.d = c.d;
  d.blocks = c.blocks;
  d.steps = c.diffusion_steps;
  return d;
}

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : ",") + p;
  return out;
}

}  // namespace

void apply(RunConfig& config, const std::string& key, const std::string& value) {
  const auto it = setters().find(normalize(trim(key)));
  if (it == setters().end()) throw ConfigError("unknown setting '" + key + "'");
  it->second(config, it->first, value);
}

Settings parse_config_text(const std::string& text) {
  Settings settings;
  std::istringstream in(text);
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || trim(line.substr(0, eq)).empty()) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    settings.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return settings;
}

Settings read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot read " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return parse_config_text(text.str());
}

RunConfig resolve(const Settings& flags) {
  RunConfig config;
  for (const auto& [key, value] : flags) {
    if (normalize(key) == "config") apply(config, key, value);
  }
  if (!config.config.empty()) {
    for (const auto& [key, value] : read_config_file(config.config)) {
      if (normalize(key) == "config") throw ConfigError("config: a config file may not name another");
      apply(config, key, value);
    }
  }
  for (const auto& [key, value] : flags) apply(config, key, value);
  return config;
}

int cmd_verify(const RunConfig& config, std::ostream& out) {
  verify::Options options;
  options.seed = config.seed;
  options.perturb_scan = config.perturb_scan;
  for (const auto& name : split_list(config.filter)) options.groups.push_back(verify::parse_group(name));
  const auto results = verify::run_checks(options);
  verify::print_results(out, results);
  return verify::all_pass(results) ? 0 : 1;
}

int cmd_bench(const RunConfig& config, std::ostream& out) {
  const bench::SuiteConfig suite = suite_from(config);
  suite.validate();
  const auto format = bench::parse_format(config.format);
  std::filesystem::create_directories(config.out);

  const auto records = bench::run_benchmark(suite);
  const bench::Metadata metadata = {
      {"machine", std::to_string(std::thread::hardware_concurrency()) + " hardware threads, 1 used"},
      {"seed", std::to_string(config.seed)},
      {"d", std::to_string(config.d)},
      {"repeats", std::to_string(config.repeats)},
      {"warmup", std::to_string(config.warmup)},
      {"frames", std::to_string(config.frames)},
      {"timing", config.timing ? "true" : "false"},
  };
  const char* file = format == bench::ReportFormat::csv ? "bench.csv"
                     : format == bench::ReportFormat::json ? "bench.json"
                                                           : "plotdata";
  for (const auto& path : bench::emit_report(records, format, config.out / file, metadata)) {
    out << "wrote " << path.string() << "\n";
  }

  const auto report = bench::scaling_report(records);
  const auto checks = bench::check_scaling(report);
  std::ofstream json(config.out / "report.json");
  json << bench::scaling_report_json(report, checks);
  if (!json) throw IoError("bench: cannot write " + (config.out / "report.json").string());

  for (const auto& [name, fit] : report.time_slopes) {
    out << "time_slope " << name << " " << number(fit.slope) << " r2=" << number(fit.r2) << "\n";
  }
  for (const auto& [name, fit] : report.memory_slopes) {
    out << "memory_slope " << name << " " << number(fit.slope) << " r2=" << number(fit.r2) << "\n";
  }
  for (const auto& w : report.warnings) out << "warning: " << w << "\n";
  std::vector<std::string> violated;
  for (const auto& c : checks) {
    out << (c.pass ? "PASS " : "FAIL ") << c.name << " value=" << number(c.value) << " threshold=" << number(c.threshold)
        << "\n";
    if (!c.pass) violated.push_back(c.name);
  }
  out << "failures: " << (violated.empty() ? "none" : join(violated)) << "\n";
  return violated.empty() ? 0 : 1;
}

int cmd_train(const RunConfig& config, std::ostream& out) {
  const DenoiserConfig model = denoiser_from(config);
  model.validate();
  TrainOptions options;
  options.steps = config.steps;
  options.batch = config.batch;
  options.lr = config.lr;
  options.seed = config.seed;
  options.p_uncond = config.p_uncond;
  options.dataset_size = config.dataset_size;
  options.beta_first = config.beta_first;
  options.beta_last = config.beta_last;

  std::filesystem::create_directories(config.out);
  const auto log_path = config.out / "loss.csv";
  std::ofstream log(log_path, std::ios::binary);
  if (!log) throw IoError("train: cannot write " + log_path.string());
  log << (config.timing ? "step,loss,wall_ms\n" : "step,loss\n");

  std::vector<double> losses;
  const auto start = std::chrono::steady_clock::now();
  const DenoiserParams params = train_denoiser(model, options, [&](Index step, double loss) {
    losses.push_back(loss);
    log << step + 1 << "," << number(loss);
    if (config.timing) {
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      char buf[32];
      std::snprintf(buf, sizeof buf, ",%.3f", ms);
      log << buf;
    }
    log << "\n";
  });
  log.flush();
  if (!log) throw IoError("train: write to " + log_path.string() + " failed");

  Checkpoint ckpt = params.to_checkpoint();
  ckpt.meta["beta_first"] = number(config.beta_first);
  ckpt.meta["beta_last"] = number(config.beta_last);
  ckpt.meta["seed"] = std::to_string(config.seed);
  save_checkpoint(config.out / "checkpoint.bin", ckpt);

  out << "parameters " << params.parameter_count() << "\n";
  out << "steps " << losses.size() << "\n";
  if (!losses.empty()) {
    const std::size_t window = std::min<std::size_t>(100, losses.size());
    const double first = window_mean(losses, 0, window);
    const double last = window_mean(losses, losses.size() - window, window);
    out << "loss_first " << number(first) << "\nloss_last " << number(last) << "\nloss_ratio " << number(last / first)
        << "\n";
  }
  out << "wrote " << (config.out / "checkpoint.bin").string() << " " << log_path.string() << "\n";
  return 0;
}

void write_pgm(const std::filesystem::path& path, const double* pixels, Index height, Index width) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("pgm: cannot write " + path.string());
  out << "P5\n" << width << " " << height << "\n255\n";
  for (Index i = 0; i < height * width; ++i) {
    const double level = std::clamp((pixels[i] + 1.0) * 127.5, 0.0, 255.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(level))));
  }
  if (!out) throw IoError("pgm: write to " + path.string() + " failed");
}

int cmd_sample(const RunConfig& config, std::ostream& out) {
  const auto ckpt_path = config.out / "checkpoint.bin";
  if (!std::filesystem::exists(ckpt_path)) throw IoError("sample: no checkpoint at " + ckpt_path.string());
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const DenoiserParams params = DenoiserParams::from_checkpoint(ckpt);
  if (config.class_id < 0 || config.class_id >= kShapeClasses) {
    throw ConfigError("sample: class must be in [0, " + std::to_string(kShapeClasses) + ")");
  }
  const double beta_first = ckpt.meta.count("beta_first") ? parse_double("beta_first", ckpt.meta_at("beta_first"))
                                                          : config.beta_first;
  const double beta_last =
      ckpt.meta.count("beta_last") ? parse_double("beta_last", ckpt.meta_at("beta_last")) : config.beta_last;
  const auto schedule = NoiseSchedule::linear(params.config.steps, beta_first, beta_last);

  SamplerOptions options;
  options.n_steps = config.sample_steps;
  options.guidance = config.guidance;
  options.clip_x0 = config.clip_x0;
  const auto& c = params.config;
  const Shape shape{static_cast<std::size_t>(c.frames), static_cast<std::size_t>(c.channels),
                    static_cast<std::size_t>(c.height), static_cast<std::size_t>(c.width)};
  Rng rng(config.seed);
  const NoisePredictor predict = [&](const Tensor& x, Index t, const ConditionEmbedding& cond) {
    return predict_noise(params, x, t, cond);
  };
  const Tensor clip = IdentityCodec{}.decode(
      ddim_sample(predict, schedule, ConditionEmbedding::of(config.class_id), options, shape, rng));

  std::filesystem::create_directories(config.out);
  save_tensor(config.out / "sample.tensor", clip);
  const std::size_t frame_size = static_cast<std::size_t>(c.channels * c.height * c.width);
  for (Index f = 0; f < c.frames; ++f) {
    const std::string name = "sample_frame_" + std::to_string(f) + ".pgm";
    write_pgm(config.out / name, clip.data().data() + static_cast<std::size_t>(f) * frame_size, c.height, c.width);
  }
  const auto [lo, hi] = std::minmax_element(clip.data().begin(), clip.data().end());
  out << "class " << config.class_id << " guidance " << number(config.guidance) << "\n";
  out << "range " << number(*lo) << " " << number(*hi) << "\n";
  out << "wrote " << (config.out / "sample.tensor").string() << " and " << c.frames << " pgm frames\n";
  return 0;
}

int run(const RunConfig& config, std::ostream& out, std::ostream& err) {
  try {
    if (config.command == "verify") return cmd_verify(config, out);
    if (config.command == "bench") return cmd_bench(config, out);
    if (config.command == "train") return cmd_train(config, out);
    if (config.command == "sample") return cmd_sample(config, out);
    err << "error: unknown command '" << config.command << "' (expected verify, bench, train or sample)\n";
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
  }
  return 2;
}

}  // namespace vrwkv::cli
