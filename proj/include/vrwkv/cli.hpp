#pragma once

#include "vrwkv/core.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace vrwkv::cli {

struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  std::vector<Index> sizes{256, 512, 1024, 2048, 4096};
  Index d = 32;
  std::vector<std::string> mechanisms{"scan", "direct", "softmax"};
  Index repeats = 5;
  Index warmup = 2;
  Index frames = 4;
  std::int64_t element_budget = 0;

  Index diffusion_steps = 100;
  double beta_first = 1e-4;
  double beta_last = 2e-2;
  Index blocks = 2;
  Index patch = 4;

  Index steps = 2000;
  Index batch = 8;
  double lr = 1e-3;
  double p_uncond = 0.1;
  Index dataset_size = 512;

  double guidance = 7.5;
  Index sample_steps = 50;
  int class_id = 0;
  bool clip_x0 = false;

  std::filesystem::path out = "out";
  std::filesystem::path config;
  std::string format = "csv";
  std::string filter;
  bool timing = true;
  bool perturb_scan = false;
};

using Settings = std::vector<std::pair<std::string, std::string>>;

/// Sets one field from its textual form. Keys use underscores or dashes,
/// e.g. `no-timing` or `sample_steps`. Throws ConfigError for an unknown key
/// or an unparsable value.
void apply(RunConfig& config, const std::string& key, const std::string& value);

/// Flat `key = value` lines; blank lines and `#` comments are ignored.
Settings parse_config_text(const std::string& text);
Settings read_config_file(const std::filesystem::path& path);

/// Defaults, then the config file named by `config` in `flags`, then the
/// remaining flags.
RunConfig resolve(const Settings& flags);

int cmd_verify(const RunConfig& config, std::ostream& out);
int cmd_bench(const RunConfig& config, std::ostream& out);
int cmd_train(const RunConfig& config, std::ostream& out);
int cmd_sample(const RunConfig& config, std::ostream& out);

/// Dispatches on config.command. Errors print to `err` and give exit code 2.
int run(const RunConfig& config, std::ostream& out, std::ostream& err);

/// Binary PGM of one [height x width] frame, mapping [-1, 1] to [0, 255].
void write_pgm(const std::filesystem::path& path, const double* pixels, Index height, Index width);

}  // namespace vrwkv::cli
