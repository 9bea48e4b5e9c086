#pragma once

// Run configuration for the command-line front end.  A config file is a
// strict INI-style text: '[section]' headers, 'key = value' lines, '#'
// comments.  Unknown sections or keys are errors, so typos cannot silently
// fall back to defaults.  Every run starts from per-command defaults, then
// applies the file, then the command-line flags, and the fully resolved
// result is embedded in every output file.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tweezersim/assembler.hpp"
#include "tweezersim/dynamics.hpp"
#include "tweezersim/errors.hpp"
#include "tweezersim/io.hpp"
#include "tweezersim/lattice.hpp"
#include "tweezersim/noise.hpp"

namespace tweezersim {

enum class Command { assemble, rabi, blockade, recapture, fit };

inline std::string command_name(Command cmd) {
  switch (cmd) {
    case Command::assemble:
      return "assemble";
    case Command::rabi:
      return "rabi";
    case Command::blockade:
      return "blockade";
    case Command::recapture:
      return "recapture";
    case Command::fit:
      return "fit";
  }
  throw Error("unreachable command");
}

// Measured parameters of the three microlens arrays this models: trap pitch
// and trapping wavelength differ per array, waist and depth do not.
inline void apply_preset(TrapArray& array, int preset) {
  switch (preset) {
    case 1:
      array.pitch_um = 14.1;
      array.trap_wavelength_nm = 798.6;
      break;
    case 2:
      array.pitch_um = 10.3;
      array.trap_wavelength_nm = 797.3;
      break;
    case 3:
      array.pitch_um = 7.0;
      array.trap_wavelength_nm = 797.3;
      break;
    default:
      throw ConfigError("preset must be 1, 2, or 3");
  }
  array.trap_waist_um = 1.45;
  array.trap_depth_uK = 1000.0;
}

// Gaussian excitation beam across the array.  The Rabi frequency follows
// the field amplitude, so Omega(r) = rabi_max * exp(-|r - c|^2 / w^2) and
// the intensity-like quantity Omega^2 falls with exp(-2 d^2 / w^2).  An
// absent center means "half a pitch diagonally off the center of the
// analyzed region", which reproduces the measured site-to-site spread.
struct BeamModel {
  double waist_um = 19.0;
  double rabi_max_mhz = 0.77;
  std::optional<double> center_x_um;
  std::optional<double> center_y_um;
  bool uniform = false;

  void validate() const {
    if (waist_um <= 0.0) throw ConfigError("beam waist must be positive");
    if (rabi_max_mhz < 0.0)
      throw ConfigError("beam peak rabi must be non-negative");
  }

  double rabi_at(const Vec2& pos, const Vec2& center) const {
    if (uniform) return rabi_max_mhz;
    const double dx = pos.x - center.x;
    const double dy = pos.y - center.y;
    return rabi_max_mhz *
           std::exp(-(dx * dx + dy * dy) / (waist_um * waist_um));
  }
};

struct RunConfig {
  int preset = 3;
  TrapArray array;
  LoadModel load;
  ExecutionModel execution;
  std::string pattern_file;  // empty: command-specific builtin pattern
  ExcitationParams excitation;
  InteractionModel interaction;
  std::optional<double> interaction_override_mhz;
  BeamModel beam;
  NoiseModel noise;
  DetectionModel detection;
  double ponderomotive_scale = 1.0;

  int shots = 200;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  double t_max_us = 8.0;
  int samples = 81;
  int trials = 100000;  // recapture Monte Carlo
  int repeats = 100;    // independent assembly runs

  std::uint64_t require_seed() const {
    if (!seed)
      throw ConfigError("seed is mandatory; set [run] seed or pass --seed");
    return *seed;
  }

  void validate() const {
    array.validate();
    load.validate();
    execution.validate();
    excitation.validate();
    interaction.validate();
    beam.validate();
    noise.validate();
    detection.validate();
    if (!(ponderomotive_scale >= 0.0))
      throw ConfigError("ponderomotive scale must be non-negative");
    if (shots < 1) throw ConfigError("shots must be at least 1");
    if (t_max_us <= 0.0) throw ConfigError("t_max must be positive");
    if (samples < 2) throw ConfigError("need at least 2 time samples");
    if (trials < 1) throw ConfigError("trials must be at least 1");
    if (repeats < 1) throw ConfigError("repeats must be at least 1");
  }
};

// The 87D pair coupling is anchored at -24 MHz for a 7.0 um separation
// along the quantization axis; the angular table carries the measured
// enhancement at 45 degrees.  The 57D coupling is anchored at -75 kHz for
// the 9.899 um checkerboard diagonal and treated as isotropic.
inline InteractionModel interaction_87d() {
  InteractionModel model;
  model.c6_mhz_um6 = 24.0 * std::pow(7.0, 6.0);
  model.angular_factors = {{0.0, 1.0}, {M_PI / 4.0, 1.6662}, {M_PI / 2.0, 1.0}};
  return model;
}

inline InteractionModel interaction_57d() {
  InteractionModel model;
  model.c6_mhz_um6 = 0.075 * std::pow(9.899, 6.0);
  return model;
}

inline RunConfig base_config(Command cmd) {
  RunConfig config;
  apply_preset(config.array, config.preset);
  config.excitation.damping_per_us = 0.08;
  switch (cmd) {
    case Command::assemble:
      break;
    case Command::rabi:
      config.interaction = interaction_57d();
      config.excitation.rabi_mhz = 0.77;  // beam peak; per-site values vary
      config.t_max_us = 8.0;
      config.samples = 81;
      break;
    case Command::blockade:
      config.interaction = interaction_87d();
      config.excitation.rabi_mhz = 0.32;
      config.t_max_us = 5.0;
      config.samples = 101;
      break;
    case Command::recapture:
      break;
    case Command::fit:
      break;
  }
  return config;
}

namespace detail {

inline bool parse_bool(const std::string& text, int line) {
  if (text == "true" || text == "yes" || text == "1") return true;
  if (text == "false" || text == "no" || text == "0") return false;
  throw ParseError("'" + text + "' is not a boolean", line, 1);
}

inline int parse_int(const std::string& text, int line) {
  const double v = parse_double(text, line);
  const int i = static_cast<int>(v);
  if (static_cast<double>(i) != v)
    throw ParseError("'" + text + "' is not an integer", line, 1);
  return i;
}

inline std::uint64_t parse_u64(const std::string& text, int line) {
  try {
    size_t pos = 0;
    const std::uint64_t v = std::stoull(text, &pos);
    if (trim(text.substr(pos)).empty() && text.find('-') == std::string::npos)
      return v;
  } catch (const std::exception&) {
  }
  throw ParseError("'" + text + "' is not an unsigned integer", line, 1);
}

// "angle:scale, angle:scale, ..." with angles in radians.
inline std::vector<std::pair<double, double>> parse_angular_factors(
    const std::string& text, int line) {
  std::vector<std::pair<double, double>> out;
  for (const std::string& item : split(text, ',')) {
    const std::string entry = trim(item);
    if (entry.empty()) continue;
    const size_t colon = entry.find(':');
    if (colon == std::string::npos)
      throw ParseError("angular factor entry '" + entry +
                           "' is not angle:scale",
                       line, 1);
    out.emplace_back(parse_double(trim(entry.substr(0, colon)), line),
                     parse_double(trim(entry.substr(colon + 1)), line));
  }
  return out;
}

inline Vec2 parse_vec2(const std::string& text, int line) {
  const std::vector<std::string> parts = split(text, ',');
  if (parts.size() != 2)
    throw ParseError("'" + text + "' is not an x,y pair", line, 1);
  return {parse_double(trim(parts[0]), line), parse_double(trim(parts[1]), line)};
}

inline std::string emit_angular_factors(
    const std::vector<std::pair<double, double>>& factors) {
  if (factors.empty()) return "isotropic";
  std::string out;
  for (const auto& [angle, scale] : factors) {
    if (!out.empty()) out += ", ";
    out += format_g9(angle) + ":" + format_g9(scale);
  }
  return out;
}

inline void apply_config_key(RunConfig& config, const std::string& section,
                             const std::string& key, const std::string& value,
                             int line) {
  const auto num = [&] { return parse_double(value, line); };
  const auto integer = [&] { return parse_int(value, line); };

  if (section == "array") {
    if (key == "preset") {
      config.preset = integer();
      apply_preset(config.array, config.preset);
    } else if (key == "rows")
      config.array.rows = integer();
    else if (key == "cols")
      config.array.cols = integer();
    else if (key == "pitch_um")
      config.array.pitch_um = num();
    else if (key == "trap_waist_um")
      config.array.trap_waist_um = num();
    else if (key == "trap_depth_uk")
      config.array.trap_depth_uK = num();
    else if (key == "trap_wavelength_nm")
      config.array.trap_wavelength_nm = num();
    else
      throw ParseError("unknown [array] key '" + key + "'", line, 1);
  } else if (section == "load") {
    if (key == "fill_probability")
      config.load.fill_probability = num();
    else
      throw ParseError("unknown [load] key '" + key + "'", line, 1);
  } else if (section == "execution") {
    if (key == "ramp_duration_us")
      config.execution.ramp_duration_us = num();
    else if (key == "transport_duration_ms")
      config.execution.transport_duration_ms = num();
    else if (key == "cycle_overhead_ms")
      config.execution.cycle_overhead_ms = num();
    else if (key == "per_move_loss")
      config.execution.per_move_loss = num();
    else if (key == "per_cycle_loss")
      config.execution.per_cycle_loss = num();
    else if (key == "depth_lowering_factor")
      config.execution.depth_lowering_factor = num();
    else if (key == "max_cycles")
      config.execution.max_cycles = integer();
    else
      throw ParseError("unknown [execution] key '" + key + "'", line, 1);
  } else if (section == "pattern") {
    if (key == "file")
      config.pattern_file = value;
    else
      throw ParseError("unknown [pattern] key '" + key + "'", line, 1);
  } else if (section == "excitation") {
    if (key == "rabi_mhz")
      config.excitation.rabi_mhz = num();
    else if (key == "detuning_mhz")
      config.excitation.detuning_mhz = num();
    else if (key == "damping_per_us")
      config.excitation.damping_per_us = num();
    else if (key == "damping_decay_fraction")
      config.excitation.damping_decay_fraction = num();
    else if (key == "intermediate_detuning_mhz")
      config.excitation.intermediate_detuning_mhz = num();
    else if (key == "scattering_rate_per_us")
      config.excitation.scattering_rate_per_us = num();
    else
      throw ParseError("unknown [excitation] key '" + key + "'", line, 1);
  } else if (section == "interaction") {
    if (key == "c6_mhz_um6")
      config.interaction.c6_mhz_um6 = num();
    else if (key == "angular_factors")
      config.interaction.angular_factors = parse_angular_factors(value, line);
    else if (key == "quantization_axis")
      config.interaction.quantization_axis = parse_vec2(value, line);
    else if (key == "override_mhz") {
      if (value == "none")
        config.interaction_override_mhz.reset();
      else
        config.interaction_override_mhz = num();
    } else
      throw ParseError("unknown [interaction] key '" + key + "'", line, 1);
  } else if (section == "beam") {
    if (key == "waist_um")
      config.beam.waist_um = num();
    else if (key == "rabi_max_mhz")
      config.beam.rabi_max_mhz = num();
    else if (key == "center_x_um")
      config.beam.center_x_um = num();
    else if (key == "center_y_um")
      config.beam.center_y_um = num();
    else if (key == "uniform")
      config.beam.uniform = parse_bool(value, line);
    else
      throw ParseError("unknown [beam] key '" + key + "'", line, 1);
  } else if (section == "noise") {
    if (key == "temperature_uk")
      config.noise.temperature_uk = num();
    else if (key == "doppler_width_mhz")
      config.noise.doppler_width_mhz = num();
    else if (key == "power_fluct_480")
      config.noise.power_fluct_480 = num();
    else if (key == "power_fluct_780")
      config.noise.power_fluct_780 = num();
    else if (key == "rabi_jitter_mhz")
      config.noise.rabi_jitter_mhz = num();
    else if (key == "stark_jitter_mhz")
      config.noise.stark_jitter_mhz = num();
    else if (key == "pos_sigma_radial_um")
      config.noise.pos_sigma_radial_um = num();
    else if (key == "pos_sigma_axial_um")
      config.noise.pos_sigma_axial_um = num();
    else
      throw ParseError("unknown [noise] key '" + key + "'", line, 1);
  } else if (section == "detection") {
    if (key == "false_negative")
      config.detection.false_negative = num();
    else if (key == "prep_fidelity")
      config.detection.prep_fidelity = num();
    else if (key == "sequence_loss")
      config.detection.sequence_loss = num();
    else if (key == "rydberg_decay_rate")
      config.detection.rydberg_decay_rate = num();
    else if (key == "release_time_us")
      config.detection.release_time_us = num();
    else if (key == "ponderomotive_scale")
      config.ponderomotive_scale = num();
    else
      throw ParseError("unknown [detection] key '" + key + "'", line, 1);
  } else if (section == "run") {
    if (key == "shots")
      config.shots = integer();
    else if (key == "seed")
      config.seed = parse_u64(value, line);
    else if (key == "out_dir")
      config.out_dir = value;
    else if (key == "t_max_us")
      config.t_max_us = num();
    else if (key == "samples")
      config.samples = integer();
    else if (key == "trials")
      config.trials = integer();
    else if (key == "repeats")
      config.repeats = integer();
    else
      throw ParseError("unknown [run] key '" + key + "'", line, 1);
  } else {
    throw ParseError("unknown section [" + section + "]", line, 1);
  }
}

}  // namespace detail

inline void apply_config_text(RunConfig& config, const std::string& text) {
  std::istringstream stream(text);
  std::string line;
  std::string section;
  int line_number = 0;
  while (std::getline(stream, line)) {
    ++line_number;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    if (body.front() == '[') {
      if (body.back() != ']')
        throw ParseError("unterminated section header", line_number, 1);
      section = detail::trim(body.substr(1, body.size() - 2));
      static const char* const kSections[] = {
          "array",       "load",  "execution", "pattern", "excitation",
          "interaction", "beam",  "noise",     "detection", "run"};
      bool known = false;
      for (const char* name : kSections) known |= section == name;
      if (!known)
        throw ParseError("unknown section [" + section + "]", line_number, 1);
      continue;
    }
    const size_t eq = body.find('=');
    if (eq == std::string::npos)
      throw ParseError("expected 'key = value'", line_number, 1);
    const std::string key = detail::trim(body.substr(0, eq));
    const std::string value = detail::trim(body.substr(eq + 1));
    if (section.empty())
      throw ParseError("'" + key + "' appears before any [section]",
                       line_number, 1);
    detail::apply_config_key(config, section, key, value, line_number);
  }
}

inline void load_config_file(RunConfig& config, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream text;
  text << is.rdbuf();
  apply_config_text(config, text.str());
}

// Flat key -> value map of every resolved setting, embedded in CSV headers
// and JSON reports so any output can be reproduced from itself.
inline std::map<std::string, std::string> resolved_metadata(
    const RunConfig& config, Command cmd) {
  std::map<std::string, std::string> out;
  const auto put = [&](const std::string& key, double v) {
    out[key] = format_g9(v);
  };

  out["command"] = command_name(cmd);
  out["array.preset"] = std::to_string(config.preset);
  out["array.rows"] = std::to_string(config.array.rows);
  out["array.cols"] = std::to_string(config.array.cols);
  put("array.pitch_um", config.array.pitch_um);
  put("array.trap_waist_um", config.array.trap_waist_um);
  put("array.trap_depth_uk", config.array.trap_depth_uK);
  put("array.trap_wavelength_nm", config.array.trap_wavelength_nm);
  put("load.fill_probability", config.load.fill_probability);
  put("execution.ramp_duration_us", config.execution.ramp_duration_us);
  put("execution.transport_duration_ms", config.execution.transport_duration_ms);
  put("execution.cycle_overhead_ms", config.execution.cycle_overhead_ms);
  put("execution.per_move_loss", config.execution.per_move_loss);
  put("execution.per_cycle_loss", config.execution.per_cycle_loss);
  put("execution.depth_lowering_factor",
      config.execution.depth_lowering_factor);
  out["execution.max_cycles"] = std::to_string(config.execution.max_cycles);
  out["pattern.file"] =
      config.pattern_file.empty() ? "builtin" : config.pattern_file;
  put("excitation.rabi_mhz", config.excitation.rabi_mhz);
  put("excitation.detuning_mhz", config.excitation.detuning_mhz);
  put("excitation.damping_per_us", config.excitation.damping_per_us);
  put("excitation.damping_decay_fraction",
      config.excitation.damping_decay_fraction);
  put("excitation.intermediate_detuning_mhz",
      config.excitation.intermediate_detuning_mhz);
  put("excitation.scattering_rate_per_us",
      config.excitation.scattering_rate_per_us);
  put("interaction.c6_mhz_um6", config.interaction.c6_mhz_um6);
  out["interaction.angular_factors"] =
      detail::emit_angular_factors(config.interaction.angular_factors);
  out["interaction.quantization_axis"] =
      format_g9(config.interaction.quantization_axis.x) + "," +
      format_g9(config.interaction.quantization_axis.y);
  out["interaction.override_mhz"] =
      config.interaction_override_mhz
          ? format_g9(*config.interaction_override_mhz)
          : "none";
  put("beam.waist_um", config.beam.waist_um);
  put("beam.rabi_max_mhz", config.beam.rabi_max_mhz);
  out["beam.center_x_um"] = config.beam.center_x_um
                                ? format_g9(*config.beam.center_x_um)
                                : "auto";
  out["beam.center_y_um"] = config.beam.center_y_um
                                ? format_g9(*config.beam.center_y_um)
                                : "auto";
  out["beam.uniform"] = config.beam.uniform ? "true" : "false";
  put("noise.temperature_uk", config.noise.temperature_uk);
  put("noise.doppler_width_mhz", config.noise.doppler_width_mhz);
  put("noise.power_fluct_480", config.noise.power_fluct_480);
  put("noise.power_fluct_780", config.noise.power_fluct_780);
  put("noise.rabi_jitter_mhz", config.noise.rabi_jitter_mhz);
  put("noise.stark_jitter_mhz", config.noise.stark_jitter_mhz);
  put("noise.pos_sigma_radial_um", config.noise.pos_sigma_radial_um);
  put("noise.pos_sigma_axial_um", config.noise.pos_sigma_axial_um);
  put("detection.false_negative", config.detection.false_negative);
  put("detection.prep_fidelity", config.detection.prep_fidelity);
  put("detection.sequence_loss", config.detection.sequence_loss);
  put("detection.rydberg_decay_rate", config.detection.rydberg_decay_rate);
  put("detection.release_time_us", config.detection.release_time_us);
  put("detection.ponderomotive_scale", config.ponderomotive_scale);
  out["run.shots"] = std::to_string(config.shots);
  out["run.seed"] = config.seed ? std::to_string(*config.seed) : "unset";
  out["run.out_dir"] = config.out_dir;
  put("run.t_max_us", config.t_max_us);
  out["run.samples"] = std::to_string(config.samples);
  out["run.trials"] = std::to_string(config.trials);
  out["run.repeats"] = std::to_string(config.repeats);
  return out;
}

inline json resolved_json(const RunConfig& config, Command cmd) {
  json out = json::object();
  for (const auto& [key, value] : resolved_metadata(config, cmd))
    out[key] = value;
  return out;
}

}  // namespace tweezersim
