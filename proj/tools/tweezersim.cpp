// Batch front end for the simulator: assembly statistics, checkerboard
// Rabi oscillations with beam fitting, blockade scaling, recapture detection
// errors, and offline refitting of emitted CSV files.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime error,
// 3 fit non-convergence.

#include <cstdio>
#include <exception>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tweezersim/config.hpp"
#include "tweezersim/errors.hpp"
#include "tweezersim/runners.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<int> shots;
  std::optional<int> preset;
};

void add_common_flags(CLI::App& cmd, CommonFlags& flags) {
  cmd.add_option("--config", flags.config_path,
                 "Config file (strict INI; see patterns/)");
  cmd.add_option("--seed", flags.seed, "Random seed (mandatory, no default)");
  cmd.add_option("--out", flags.out_dir, "Output directory");
  cmd.add_option("--shots", flags.shots, "Monte Carlo shots per trace");
  cmd.add_option("--preset", flags.preset, "Trap array preset")
      ->check(CLI::Range(1, 3));
}

// Defaults for the subcommand, then the config file, then the flags.
tweezersim::RunConfig resolve(tweezersim::Command cmd,
                              const CommonFlags& flags) {
  tweezersim::RunConfig config = tweezersim::base_config(cmd);
  if (!flags.config_path.empty())
    tweezersim::load_config_file(config, flags.config_path);
  if (flags.preset) {
    config.preset = *flags.preset;
    tweezersim::apply_preset(config.array, config.preset);
  }
  if (flags.seed) config.seed = *flags.seed;
  if (flags.out_dir) config.out_dir = *flags.out_dir;
  if (flags.shots) config.shots = *flags.shots;
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Single-atom tweezer array simulator"};
  app.require_subcommand(1);

  CommonFlags assemble_flags, rabi_flags, blockade_flags, recapture_flags,
      fit_flags;

  CLI::App* assemble =
      app.add_subcommand("assemble", "Load and rearrange into a pattern");
  add_common_flags(*assemble, assemble_flags);
  int repeats = 0;
  assemble->add_option("--repeats", repeats, "Independent assembly runs");

  CLI::App* rabi = app.add_subcommand(
      "rabi", "Checkerboard Rabi oscillations across the beam");
  add_common_flags(*rabi, rabi_flags);

  CLI::App* blockade =
      app.add_subcommand("blockade", "Collective enhancement in clusters");
  add_common_flags(*blockade, blockade_flags);

  CLI::App* recapture =
      app.add_subcommand("recapture", "Release-and-recapture detection error");
  add_common_flags(*recapture, recapture_flags);
  int trials = 0;
  recapture->add_option("--trials", trials, "Monte Carlo trials per state");

  CLI::App* fit = app.add_subcommand("fit", "Refit columns of an emitted CSV");
  add_common_flags(*fit, fit_flags);
  std::string fit_input;
  std::vector<std::string> fit_columns;
  fit->add_option("input", fit_input, "CSV file to fit")->required();
  fit->add_option("--column", fit_columns,
                  "Column to fit (repeatable; default: all p_site columns)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (assemble->parsed()) {
      tweezersim::RunConfig config =
          resolve(tweezersim::Command::assemble, assemble_flags);
      if (repeats > 0) config.repeats = repeats;
      tweezersim::cmd_assemble(config);
    } else if (rabi->parsed()) {
      tweezersim::cmd_rabi(resolve(tweezersim::Command::rabi, rabi_flags));
    } else if (blockade->parsed()) {
      tweezersim::cmd_blockade(
          resolve(tweezersim::Command::blockade, blockade_flags));
    } else if (recapture->parsed()) {
      tweezersim::RunConfig config =
          resolve(tweezersim::Command::recapture, recapture_flags);
      if (trials > 0) config.trials = trials;
      tweezersim::cmd_recapture(config);
    } else if (fit->parsed()) {
      tweezersim::RunConfig config =
          resolve(tweezersim::Command::fit, fit_flags);
      if (!tweezersim::cmd_fit(config, fit_input, fit_columns)) return 3;
    }
  } catch (const tweezersim::FitError& e) {
    std::fprintf(stderr, "fit did not converge: %s\n", e.what());
    return 3;
  } catch (const tweezersim::ParseError& e) {
    std::fprintf(stderr, "parse error: %s\n", e.what());
    return 1;
  } catch (const tweezersim::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const tweezersim::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 2;
  }
  return 0;
}
