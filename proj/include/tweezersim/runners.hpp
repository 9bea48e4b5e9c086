#pragma once

// The experiment runners behind the CLI subcommands.  Each consumes a fully
// resolved RunConfig, writes its data files into config.out_dir, prints a
// one-line summary per result, and leaves error signalling to exceptions:
// ConfigError and ParseError for bad inputs, FitError for non-convergence,
// IoError for failed writes.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tweezersim/analysis.hpp"
#include "tweezersim/assembler.hpp"
#include "tweezersim/config.hpp"
#include "tweezersim/dynamics.hpp"
#include "tweezersim/io.hpp"
#include "tweezersim/lattice.hpp"
#include "tweezersim/noise.hpp"
#include "tweezersim/rng.hpp"

namespace tweezersim {

namespace detail {

inline std::vector<double> time_grid(double t_max_us, int samples) {
  std::vector<double> times(static_cast<size_t>(samples));
  for (int i = 0; i < samples; ++i)
    times[static_cast<size_t>(i)] =
        t_max_us * static_cast<double>(i) / static_cast<double>(samples - 1);
  return times;
}

inline std::string out_path(const RunConfig& config, const std::string& name) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(config.out_dir, ec);
  if (ec)
    throw IoError("cannot create output directory '" + config.out_dir +
                  "': " + ec.message());
  return (fs::path(config.out_dir) / name).string();
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open file '" + path + "'");
  std::ostringstream text;
  text << is.rdbuf();
  return text.str();
}

// Builtin assembly goal: a centered square target block wrapped in a
// three-site exclusion ring, so the nearest reservoir atom ends up four
// pitches away from the structure.
inline TargetPattern builtin_pattern(int rows, int cols, int target_size = 5,
                                     int ring = 3) {
  if (rows < target_size + 2 * ring || cols < target_size + 2 * ring)
    throw ConfigError(
        "array too small for the builtin pattern; provide [pattern] file");
  TargetPattern pattern(rows, cols);
  const int r0 = (rows - target_size) / 2;
  const int c0 = (cols - target_size) / 2;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const bool in_target = r >= r0 && r < r0 + target_size && c >= c0 &&
                             c < c0 + target_size;
      const bool in_frame = r >= r0 - ring && r < r0 + target_size + ring &&
                            c >= c0 - ring && c < c0 + target_size + ring;
      if (in_target)
        pattern.mark_target({r, c});
      else if (in_frame)
        pattern.mark_exclusion({r, c});
    }
  return pattern;
}

inline TargetPattern load_pattern(const RunConfig& config) {
  if (config.pattern_file.empty())
    return builtin_pattern(config.array.rows, config.array.cols);
  TargetPattern pattern = parse_pattern(read_text_file(config.pattern_file));
  if (pattern.rows() != config.array.rows ||
      pattern.cols() != config.array.cols)
    throw ConfigError("pattern is " + std::to_string(pattern.rows()) + "x" +
                      std::to_string(pattern.cols()) + " but the array is " +
                      std::to_string(config.array.rows) + "x" +
                      std::to_string(config.array.cols));
  return pattern;
}

inline json fit_report(const RabiFit& fit) {
  json out = json::object();
  out["rabi_mhz"] = fit.rabi_mhz;
  out["rabi_err_mhz"] = fit.rabi_err_mhz;
  out["damping_per_us"] = fit.damping_per_us;
  out["damping_err_per_us"] = fit.damping_err_per_us;
  out["amplitude"] = fit.amplitude;
  out["amplitude_err"] = fit.amplitude_err;
  out["offset"] = fit.offset;
  out["offset_err"] = fit.offset_err;
  out["residual_rms"] = fit.residual_rms;
  out["iterations"] = fit.iterations;
  return out;
}

}  // namespace detail

// Repeated stochastic load plus rearrangement of the target pattern; emits
// per-run statistics, occupancy snapshots for the first few runs, and the
// aggregate success rate with a 95% interval.
inline void cmd_assemble(const RunConfig& config) {
  config.validate();
  const std::uint64_t seed = config.require_seed();
  const TargetPattern pattern = detail::load_pattern(config);

  json trials = json::array();
  int successes = 0;
  constexpr int kSnapshotRuns = 5;
  for (int run = 0; run < config.repeats; ++run) {
    const AssembleResult result =
        assemble(config.array, pattern, config.load, config.execution,
                 rng::derive(seed, static_cast<std::uint64_t>(run)));
    if (result.success) ++successes;

    json record = json::object();
    record["run"] = run;
    record["success"] = result.success;
    record["cycles_used"] = result.cycles_used;
    record["total_moves"] = result.total_moves;
    record["atoms_lost"] = result.atoms_lost;
    record["atoms_discarded"] = result.atoms_discarded;
    record["last_shortfall"] = result.last_shortfall;
    record["duration_ms"] = result.total_duration_ms;
    record["initial_atoms"] = result.initial_grid.atom_count();
    if (run < kSnapshotRuns) {
      record["initial_occupancy"] = emit_occupancy(result.initial_grid);
      record["final_occupancy"] = emit_occupancy(result.final_grid);
    }
    trials.push_back(std::move(record));
  }

  const double rate =
      static_cast<double>(successes) / static_cast<double>(config.repeats);
  const ProportionInterval ci = wilson_interval(successes, config.repeats);

  json report = json::object();
  report["config"] = resolved_json(config, Command::assemble);
  report["pattern"] = emit_pattern(pattern);
  report["target_sites"] = pattern.target_count();
  report["runs"] = config.repeats;
  report["successes"] = successes;
  report["success_rate"] = rate;
  report["success_ci_low"] = ci.low;
  report["success_ci_high"] = ci.high;
  report["trials"] = std::move(trials);

  const std::string path = detail::out_path(config, "assemble.json");
  write_json_file(path, report);
  std::printf("assemble: %d/%d defect-free (rate %.3f, 95%% CI [%.3f, %.3f]) -> %s\n",
              successes, config.repeats, rate, ci.low, ci.high, path.c_str());
}

namespace detail {

// The checkerboard half that contains a site also contains its diagonal
// neighbours, so each simultaneously excited cluster is the site plus up to
// four atoms one diagonal step away.
inline std::vector<SiteIndex> diagonal_cluster(const TrapArray& array,
                                               SiteIndex center) {
  std::vector<SiteIndex> sites{center};
  for (int dr : {-1, 1})
    for (int dc : {-1, 1}) {
      const SiteIndex n{center.row + dr, center.col + dc};
      if (array.contains(n)) sites.push_back(n);
    }
  return sites;
}

}  // namespace detail

// Simultaneous driving of a checkerboard pattern: the central 5x5 block of
// sites is analyzed one site at a time, each simulated together with its
// diagonal neighbours (the other checkerboard half is empty in that
// measurement, so nearest neighbours never interact).  Per-site Rabi
// frequencies follow the Gaussian excitation beam; every site's averaged
// trace is fitted and the fitted amplitudes map out the beam.
inline void cmd_rabi(const RunConfig& config) {
  config.validate();
  const std::uint64_t seed = config.require_seed();
  constexpr int kRegion = 5;
  if (config.array.rows < kRegion || config.array.cols < kRegion)
    throw ConfigError("rabi needs at least a 5x5 array");

  const int r0 = (config.array.rows - kRegion) / 2;
  const int c0 = (config.array.cols - kRegion) / 2;
  const Vec2 region_center =
      site_position(config.array, {r0 + kRegion / 2, c0 + kRegion / 2});
  const Vec2 beam_center{
      config.beam.center_x_um ? *config.beam.center_x_um
                              : region_center.x + config.array.pitch_um / 2.0,
      config.beam.center_y_um ? *config.beam.center_y_um
                              : region_center.y + config.array.pitch_um / 2.0};

  const std::vector<double> times =
      detail::time_grid(config.t_max_us, config.samples);

  TimeSeries merged;
  merged.times_us = times;
  merged.metadata = resolved_metadata(config, Command::rabi);
  merged.metadata["beam.resolved_center_x_um"] = format_g9(beam_center.x);
  merged.metadata["beam.resolved_center_y_um"] = format_g9(beam_center.y);

  std::map<SiteIndex, double> fitted_rabi;
  json site_fits = json::array();
  double damping_sum = 0.0, damping_sq_sum = 0.0;
  double rabi_min = 0.0, rabi_max = 0.0;

  int fitted_sites = 0;
  for (int r = r0; r < r0 + kRegion; ++r)
    for (int c = c0; c < c0 + kRegion; ++c) {
      const SiteIndex site{r, c};
      const std::vector<SiteIndex> cluster =
          detail::diagonal_cluster(config.array, site);

      ClusterDynamicsSpec spec;
      spec.params = config.excitation;
      spec.interaction = config.interaction;
      spec.interaction_override_mhz = config.interaction_override_mhz;
      for (SiteIndex s : cluster) {
        const Vec2 pos = site_position(config.array, s);
        spec.positions_um.push_back({pos.x, pos.y, 0.0});
        spec.per_atom_rabi_mhz.push_back(
            config.beam.rabi_at(pos, beam_center));
      }

      const TimeSeries avg = monte_carlo_dynamics(
          spec, config.noise, times, config.shots,
          rng::derive(seed,
                      static_cast<std::uint64_t>(config.array.flat_index(site))));

      const std::string column =
          "p_site_r" + std::to_string(r) + "c" + std::to_string(c);
      merged.columns.push_back(column);
      merged.values.push_back(avg.column("p_site_0"));

      const RabiFit fit = fit_rabi(avg, "p_site_0");
      fitted_rabi[site] = fit.rabi_mhz;
      damping_sum += fit.damping_per_us;
      damping_sq_sum += fit.damping_per_us * fit.damping_per_us;
      if (fitted_sites == 0 || fit.rabi_mhz < rabi_min) rabi_min = fit.rabi_mhz;
      if (fitted_sites == 0 || fit.rabi_mhz > rabi_max) rabi_max = fit.rabi_mhz;
      ++fitted_sites;

      json entry = detail::fit_report(fit);
      entry["row"] = r;
      entry["col"] = c;
      entry["cluster_atoms"] = static_cast<int>(cluster.size());
      entry["beam_rabi_mhz"] = spec.per_atom_rabi_mhz.front();
      site_fits.push_back(std::move(entry));
    }

  merged.n_atoms = fitted_sites;
  const std::string csv_path = detail::out_path(config, "rabi_sites.csv");
  write_csv_file(csv_path, merged);

  const BeamFit beam = fit_beam_profile(fitted_rabi, config.array);
  const double damping_mean = damping_sum / fitted_sites;
  const double damping_var =
      damping_sq_sum / fitted_sites - damping_mean * damping_mean;

  json report = json::object();
  report["config"] = resolved_json(config, Command::rabi);
  report["beam_center_x_um"] = beam_center.x;
  report["beam_center_y_um"] = beam_center.y;
  report["sites"] = std::move(site_fits);
  report["rabi_min_mhz"] = rabi_min;
  report["rabi_max_mhz"] = rabi_max;
  report["damping_mean_per_us"] = damping_mean;
  report["damping_stddev_per_us"] =
      damping_var > 0.0 ? std::sqrt(damping_var) : 0.0;
  json beam_report = json::object();
  beam_report["center_x_um"] = beam.center_um.x;
  beam_report["center_y_um"] = beam.center_um.y;
  beam_report["waist_um"] = beam.waist_um;
  beam_report["waist_err_um"] = beam.waist_err_um;
  beam_report["rabi_max_mhz"] = beam.rabi_max_mhz;
  beam_report["rabi_max_err_mhz"] = beam.rabi_max_err_mhz;
  beam_report["waist_is_lower_bound"] = beam.waist_is_lower_bound;
  report["beam_fit"] = std::move(beam_report);

  const std::string json_path = detail::out_path(config, "rabi_fits.json");
  write_json_file(json_path, report);
  std::printf(
      "rabi: %d sites fitted, rabi %.3f..%.3f MHz, damping %.3f(%.3f) /us, "
      "beam waist %.2f um -> %s, %s\n",
      fitted_sites, rabi_min, rabi_max, damping_mean,
      damping_var > 0.0 ? std::sqrt(damping_var) : 0.0, beam.waist_um,
      csv_path.c_str(), json_path.c_str());
}

// Collective enhancement in small fully blockaded clusters: a single atom, a
// nearest-neighbour pair, and a right-triangle triple are driven with the
// same calibration; the single-excitation probability of each is fitted and
// compared against the sqrt(N) expectation.  Observed-space traces carry the
// detection chain applied forward; corrected-space traces invert it again.
inline void cmd_blockade(const RunConfig& config) {
  config.validate();
  const std::uint64_t seed = config.require_seed();
  const double p = config.array.pitch_um;
  const std::vector<std::vector<Vec3>> clusters = {
      {{0.0, 0.0, 0.0}},
      {{0.0, 0.0, 0.0}, {p, 0.0, 0.0}},
      {{0.0, 0.0, 0.0}, {p, 0.0, 0.0}, {0.0, p, 0.0}}};

  const std::vector<double> times =
      detail::time_grid(config.t_max_us, config.samples);

  std::vector<std::pair<int, RabiFit>> fits;
  json cluster_reports = json::array();

  for (const std::vector<Vec3>& positions : clusters) {
    const int n = static_cast<int>(positions.size());
    ClusterDynamicsSpec spec;
    spec.positions_um = positions;
    spec.params = config.excitation;
    spec.interaction = config.interaction;
    spec.interaction_override_mhz = config.interaction_override_mhz;

    const TimeSeries raw =
        monte_carlo_dynamics(spec, config.noise, times, config.shots,
                             rng::derive(seed, static_cast<std::uint64_t>(n)));
    TimeSeries observed =
        static_correction(raw, config.detection, CorrectionDirection::forward);
    TimeSeries corrected = static_correction(observed, config.detection,
                                             CorrectionDirection::inverse);
    const std::map<std::string, std::string> provenance =
        resolved_metadata(config, Command::blockade);
    observed.metadata.insert(provenance.begin(), provenance.end());
    corrected.metadata.insert(provenance.begin(), provenance.end());

    const std::string stem = "blockade_n" + std::to_string(n);
    write_csv_file(detail::out_path(config, stem + "_observed.csv"), observed);
    write_csv_file(detail::out_path(config, stem + "_corrected.csv"), corrected);

    const RabiFit fit = fit_rabi(corrected, TimeSeries::count_column(1));
    fits.emplace_back(n, fit);

    json entry = detail::fit_report(fit);
    entry["n_atoms"] = n;
    entry["clipped_samples"] = corrected.metadata.at("clipped_samples");
    cluster_reports.push_back(std::move(entry));
  }

  const CollectiveScaling scaling = collective_scaling(fits);

  // Ideal-blockade leakage reference for the triple: the same noiseless
  // drive with couplings pinned far beyond the collective Rabi frequency
  // bounds how much double excitation the finite couplings admit.
  ClusterDynamicsSpec leak_spec;
  leak_spec.positions_um = clusters.back();
  leak_spec.params = config.excitation;
  leak_spec.interaction = config.interaction;
  leak_spec.interaction_override_mhz = config.interaction_override_mhz;
  const TimeSeries finite =
      evolve_sampled(leak_spec, QuantumState::ground(3), times);
  leak_spec.interaction_override_mhz = -1000.0;
  const TimeSeries ideal =
      evolve_sampled(leak_spec, QuantumState::ground(3), times);

  TimeSeries leakage;
  leakage.times_us = times;
  leakage.n_atoms = 3;
  leakage.metadata = resolved_metadata(config, Command::blockade);
  leakage.columns = {"leak_finite", "leak_ideal"};
  std::vector<double> leak_finite(times.size()), leak_ideal(times.size());
  double max_finite = 0.0, max_ideal = 0.0;
  for (size_t s = 0; s < times.size(); ++s) {
    leak_finite[s] = finite.column("p_k2")[s] + finite.column("p_k3")[s];
    leak_ideal[s] = ideal.column("p_k2")[s] + ideal.column("p_k3")[s];
    max_finite = std::max(max_finite, leak_finite[s]);
    max_ideal = std::max(max_ideal, leak_ideal[s]);
  }
  leakage.values = {std::move(leak_finite), std::move(leak_ideal)};
  write_csv_file(detail::out_path(config, "blockade_leakage.csv"), leakage);

  json report = json::object();
  report["config"] = resolved_json(config, Command::blockade);
  report["clusters"] = std::move(cluster_reports);
  json ratios = json::array();
  for (const CollectiveScalingEntry& entry : scaling.entries) {
    json row = json::object();
    row["n_atoms"] = entry.n_atoms;
    row["rabi_mhz"] = entry.rabi_mhz;
    row["rabi_err_mhz"] = entry.rabi_err_mhz;
    row["ratio"] = entry.ratio;
    row["ratio_err"] = entry.ratio_err;
    ratios.push_back(std::move(row));
  }
  report["collective_scaling"] = std::move(ratios);
  report["max_abs_deviation"] = scaling.max_abs_deviation;
  report["leakage_max_finite"] = max_finite;
  report["leakage_max_ideal"] = max_ideal;

  const std::string json_path = detail::out_path(config, "blockade.json");
  write_json_file(json_path, report);
  std::printf("blockade: ratios");
  for (const CollectiveScalingEntry& entry : scaling.entries)
    std::printf(" N=%d %.4f(%.4f)", entry.n_atoms, entry.ratio,
                entry.ratio_err);
  std::printf(", max leakage %.2e (ideal %.2e) -> %s\n", max_finite, max_ideal,
              json_path.c_str());
}

// Release-and-recapture detection errors: the ground-state recapture rate
// and the survival of the two Rydberg levels this models, each with a 95%
// interval, at the configured ponderomotive hill scale.
inline void cmd_recapture(const RunConfig& config) {
  config.validate();
  const std::uint64_t seed = config.require_seed();

  DetectionModel level87 = config.detection;
  level87.rydberg_decay_rate =
      config.detection.rydberg_decay_rate * std::pow(57.0 / 87.0, 3.0);

  struct Case {
    const char* label;
    AtomState state;
    const DetectionModel* det;
  };
  const Case cases[] = {
      {"ground", AtomState::ground, &config.detection},
      {"rydberg_n57", AtomState::rydberg, &config.detection},
      {"rydberg_n87", AtomState::rydberg, &level87},
  };

  json results = json::array();
  std::string summary;
  for (std::uint64_t i = 0; i < 3; ++i) {
    const Case& c = cases[i];
    const double prob = recapture_probability(
        config.array, *c.det, config.noise, c.state, config.trials,
        rng::derive(seed, i), config.ponderomotive_scale);
    const long hits = std::lround(prob * config.trials);
    const ProportionInterval ci = wilson_interval(hits, config.trials);

    json entry = json::object();
    entry["state"] = c.label;
    entry["trials"] = config.trials;
    entry["decay_rate_per_us"] = c.det->rydberg_decay_rate;
    entry["p_recapture"] = prob;
    entry["ci_low"] = ci.low;
    entry["ci_high"] = ci.high;
    if (c.state == AtomState::rydberg) {
      // A recaptured Rydberg atom is indistinguishable from a ground-state
      // atom in the readout.
      entry["false_negative"] = prob;
    }
    results.push_back(std::move(entry));
    summary += std::string(" ") + c.label + " " + format_g9(prob);
  }

  json report = json::object();
  report["config"] = resolved_json(config, Command::recapture);
  report["results"] = std::move(results);

  const std::string path = detail::out_path(config, "recapture.json");
  write_json_file(path, report);
  std::printf("recapture:%s -> %s\n", summary.c_str(), path.c_str());
}

// Offline fitting of a previously written CSV.  Fits every per-site column
// by default, or exactly the columns the caller names.  Columns that fail
// to converge are reported; any failure makes the caller exit with the
// non-convergence code.
inline bool cmd_fit(const RunConfig& config, const std::string& input_path,
                    std::vector<std::string> columns) {
  const TimeSeries series = read_csv_file(input_path);
  if (columns.empty()) {
    for (const std::string& name : series.columns)
      if (name.rfind("p_site", 0) == 0) columns.push_back(name);
    if (columns.empty())
      throw ConfigError("'" + input_path +
                        "' has no p_site columns; name one with --column");
  }

  json fits = json::array();
  bool all_converged = true;
  for (const std::string& name : columns) {
    json entry = json::object();
    entry["column"] = name;
    entry["n_points"] = series.times_us.size();
    try {
      const RabiFit fit = fit_rabi(series, name);
      entry.update(detail::fit_report(fit));
    } catch (const FitError& err) {
      entry["error"] = err.what();
      all_converged = false;
    }
    fits.push_back(std::move(entry));
  }

  json report = json::object();
  report["input"] = input_path;
  json source = json::object();
  for (const auto& [key, value] : series.metadata) source[key] = value;
  report["source_metadata"] = std::move(source);
  report["fits"] = std::move(fits);

  const std::string path = detail::out_path(config, "fit.json");
  write_json_file(path, report);
  std::printf("fit: %zu column%s from %s -> %s%s\n", columns.size(),
              columns.size() == 1 ? "" : "s", input_path.c_str(), path.c_str(),
              all_converged ? "" : " (with non-converged fits)");
  return all_converged;
}

}  // namespace tweezersim
