// Command-line runner for the simulation benchmarks.
//
//   brr run --preset sw-desk --output out/sw --workers 4
//   brr run --config configs/ase.conf --seed 7 -v
//   brr plot --csv out/sw/results.csv --output out/sw/summary.svg

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "brr/brr.hpp"

namespace {

constexpr int kConfigError = 1;

int run_command(const std::string& config_path, const std::string& preset, const std::string& output,
                std::size_t workers, std::optional<std::uint64_t> seed, int verbosity) {
  brr::ExperimentConfig cfg;
  try {
    if (config_path.empty() && preset.empty()) throw brr::ConfigError("give --config or --preset");
    const brr::ConfigFile file = config_path.empty() ? brr::ConfigFile{} : brr::ConfigFile::load(config_path);
    cfg = brr::load_experiment_config(file, preset);
    if (!output.empty()) cfg.output_dir = output;
    if (workers > 0) cfg.workers = workers;
    if (seed) cfg.seed = *seed;
    cfg.validate();
  } catch (const brr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }

  brr::ProgressFn progress;
  if (verbosity > 0) {
    progress = [verbosity](const brr::MetricsReport& r, std::size_t done, std::size_t total) {
      std::cerr << "[" << done << "/" << total << "] " << r.learner << " " << r.divergence << " " << r.scheme
                << " m=" << r.m << " rep=" << r.replicate;
      if (r.failed)
        std::cerr << " FAILED" << (verbosity > 1 ? ": " + r.failure : std::string());
      else
        std::cerr << " mae=" << r.metrics.mae;
      if (verbosity > 1 && !r.note.empty()) std::cerr << " (" << r.note << ")";
      std::cerr << "\n";
    };
  }
  const auto result = brr::run_experiment(cfg, progress);
  brr::write_outputs(cfg, result);
  std::cout << brr::summary_table(result.summary);
  std::cout << "wrote " << cfg.output_dir << "/results.csv (" << result.reports.size() << " rows)\n";
  if (result.flagged_cells > 0)
    std::cerr << result.flagged_cells << " cell(s) had more than half of their replicates fail\n";
  return result.exit_code();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bregman-Riesz regression benchmarks"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run an experiment and write CSV results");
  std::string config_path, preset, output;
  std::size_t workers = 0;
  std::optional<std::uint64_t> seed;
  int verbosity = 0;
  run->add_option("-c,--config", config_path, "experiment config file")->check(CLI::ExistingFile);
  run->add_option("-p,--preset", preset, "preset: smoke, {ape,ase,sw}-desk, {ape,ase,sw}-full");
  run->add_option("-o,--output", output, "output directory (overrides the config)");
  run->add_option("-w,--workers", workers, "worker threads (overrides the config)");
  run->add_option("-s,--seed", seed, "base seed (overrides the config)");
  run->add_flag("-v,--verbose", verbosity, "progress on stderr; repeat for failure messages");

  auto* plot = app.add_subcommand("plot", "render bias/MAE/RMSE panels against m as SVG");
  std::string csv_path, svg_path;
  plot->add_option("--csv", csv_path, "results.csv from a run")->required();
  plot->add_option("-o,--output", svg_path, "SVG file to write")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return run_command(config_path, preset, output, workers, seed, verbosity);
    if (*plot) {
      brr::plot_summary(csv_path, svg_path);
      std::cout << "wrote " << svg_path << "\n";
    }
  } catch (const brr::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kConfigError;
  } catch (const brr::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  }
  return 0;
}
