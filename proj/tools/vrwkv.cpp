#include "vrwkv/cli.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <string>
#include <vector>

int main(int argc, char** argv) {
  CLI::App app{"Bi-WKV attention, VRWKV blocks and a toy video diffusion model"};
  app.set_help_all_flag("--help-all");

  std::string command;
  app.add_option("command", command, "verify | bench | train | sample")
      ->required()
      ->check(CLI::IsMember({"verify", "bench", "train", "sample"}));

  // Every setting is read as text so that unset flags leave the config file alone.
  std::map<std::string, std::string> values;
  const std::pair<const char*, const char*> options[] = {
      {"--seed", "Seed for every random draw"},
      {"--sizes", "Comma-separated token counts (tokens per frame for the sparse mechanisms)"},
      {"--d", "Channel width"},
      {"--mechanisms", "Comma-separated bench mechanisms"},
      {"--steps", "Training steps"},
      {"--batch", "Clips per training step"},
      {"--lr", "Adam learning rate"},
      {"--guidance", "Classifier-free guidance scale"},
      {"--out", "Output directory"},
      {"--config", "Flat key = value config file"},
      {"--format", "Bench report format: csv, json or plotdata"},
      {"--filter", "Comma-separated verify groups: equivalence, gradient, invariant"},
      {"--class", "Shape class to sample: 0 square, 1 circle, 2 triangle"},
      {"--sample-steps", "DDIM steps"},
      {"--repeats", "Timed repeats per bench size"},
      {"--frames", "Frames per clip"},
      {"--blocks", "VRWKV blocks in the denoiser"},
  };
  for (const auto& [flag, help] : options) app.add_option(flag, values[flag + 2], help);
  std::vector<std::string> extra;
  app.add_option("--set", extra, "Any other setting as key=value; repeatable");
  bool no_timing = false, perturb_scan = false, clip_x0 = false;
  app.add_flag("--no-timing", no_timing, "Leave wall-clock columns out of logs and reports");
  app.add_flag("--clip-x0", clip_x0, "Clamp predicted clean clips to [-1, 1] while sampling");
  app.add_flag("--perturb-scan", perturb_scan)->group("");

  CLI11_PARSE(app, argc, argv);

  vrwkv::cli::Settings flags{{"command", command}};
  for (const auto& [flag, help] : options) {
    if (app.count(flag) > 0) flags.emplace_back(flag + 2, values[flag + 2]);
  }
  for (const auto& item : extra) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) {
      std::cerr << "error: --set expects key=value, got '" << item << "'\n";
      return 2;
    }
    flags.emplace_back(item.substr(0, eq), item.substr(eq + 1));
  }
  if (no_timing) flags.emplace_back("no_timing", "true");
  if (clip_x0) flags.emplace_back("clip_x0", "true");
  if (perturb_scan) flags.emplace_back("perturb_scan", "true");

  vrwkv::cli::RunConfig config;
  try {
    config = vrwkv::cli::resolve(flags);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return vrwkv::cli::run(config, std::cout, std::cerr);
}
