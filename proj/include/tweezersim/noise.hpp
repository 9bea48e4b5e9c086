#pragma once

// Shot-to-shot experimental imperfections and detection physics: sampled
// parameter fluctuations feeding Monte Carlo averages of the coherent
// dynamics, a trajectory simulation of Rydberg-atom recapture after a
// release-and-recapture detection cycle, and the static scaling between
// true and observed excitation probabilities.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "tweezersim/dynamics.hpp"
#include "tweezersim/errors.hpp"
#include "tweezersim/geometry.hpp"
#include "tweezersim/lattice.hpp"
#include "tweezersim/rng.hpp"

namespace tweezersim {

// One-sigma widths of the shot-to-shot fluctuations.  Defaults reproduce
// the error budget of the 57D measurement campaign.
struct NoiseModel {
  double temperature_uk = 52.0;      // atomic ensemble temperature
  double doppler_width_mhz = 0.170;  // detuning spread from thermal motion
  double power_fluct_480 = 0.05;     // relative power spread, blue beam
  double power_fluct_780 = 0.02;     // relative power spread, red beam
  double rabi_jitter_mhz = 0.037;    // resulting drive spread, for reference
  double stark_jitter_mhz = 0.024;   // light-shift spread of the resonance
  double pos_sigma_radial_um = 0.3;  // in-plane position spread per atom
  double pos_sigma_axial_um = 2.4;   // along the trap axis

  void validate() const {
    const double fields[] = {temperature_uk,  doppler_width_mhz,
                             power_fluct_480, power_fluct_780,
                             rabi_jitter_mhz, stark_jitter_mhz,
                             pos_sigma_radial_um, pos_sigma_axial_um};
    for (double f : fields)
      if (!(f >= 0.0) || !std::isfinite(f))
        throw ConfigError("noise model fields must be finite and non-negative");
  }

  // The two-photon drive scales with the geometric mean of both beam
  // intensities, so relative power spreads enter at half weight each.
  double rabi_scale_sigma() const {
    return 0.5 * std::hypot(power_fluct_480, power_fluct_780);
  }
};

// Parameters of the state-detection chain.  The false-negative probability
// depends on the addressed Rydberg level through its radiative lifetime.
struct DetectionModel {
  double false_negative = 0.19;       // excited atom read out as ground
  double prep_fidelity = 0.96;        // initial-state preparation
  double sequence_loss = 0.05;        // atom lost independent of state
  double rydberg_decay_rate = 0.005;  // 1/us, return to the trappable state
  double release_time_us = 10.0;      // traps off during the readout window

  void validate() const {
    for (double p : {false_negative, prep_fidelity, sequence_loss})
      if (!(p >= 0.0 && p <= 1.0))
        throw ConfigError("detection probabilities must lie in [0, 1]");
    if (!(rydberg_decay_rate >= 0.0) || !std::isfinite(rydberg_decay_rate))
      throw ConfigError("decay rate must be finite and non-negative");
    if (!(release_time_us >= 0.0))
      throw ConfigError("release time must be non-negative");
  }
};

// One realization of the fluctuating parameters.  Laser power (and the
// resulting drive scale) is common to all atoms within a shot; Doppler
// detunings and position offsets are independent per atom.
struct ShotSample {
  std::vector<double> doppler_detuning_mhz;
  double rabi_scale = 1.0;
  double stark_offset_mhz = 0.0;
  std::vector<Vec3> position_offsets_um;
};

enum class AtomState { ground, rydberg };
enum class CorrectionDirection { forward, inverse };

inline ShotSample sample_shot(const NoiseModel& noise, int n_atoms,
                              std::uint64_t seed, std::uint64_t shot_index) {
  noise.validate();
  if (n_atoms < 1) throw ConfigError("shot sampling needs at least one atom");

  // Every variate is drawn even when its width is zero, so switching one
  // noise term off never reshuffles the others between paired runs.
  rng::Stream stream(rng::derive(seed, shot_index));
  ShotSample sample;
  sample.doppler_detuning_mhz.reserve(static_cast<size_t>(n_atoms));
  for (int i = 0; i < n_atoms; ++i)
    sample.doppler_detuning_mhz.push_back(
        stream.gaussian(0.0, noise.doppler_width_mhz));
  sample.rabi_scale = stream.gaussian(1.0, noise.rabi_scale_sigma());
  sample.stark_offset_mhz = stream.gaussian(0.0, noise.stark_jitter_mhz);
  sample.position_offsets_um.reserve(static_cast<size_t>(n_atoms));
  for (int i = 0; i < n_atoms; ++i) {
    Vec3 d;
    d.x = stream.gaussian(0.0, noise.pos_sigma_radial_um);
    d.y = stream.gaussian(0.0, noise.pos_sigma_radial_um);
    d.z = stream.gaussian(0.0, noise.pos_sigma_axial_um);
    sample.position_offsets_um.push_back(d);
  }
  return sample;
}

namespace detail {

// Sum with a fixed pairwise association tree, so the result depends only on
// the slot contents and count, never on accumulation order.
inline double pairwise_sum(const double* v, std::size_t n) {
  if (n <= 8) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += v[i];
    return s;
  }
  const std::size_t h = n / 2;
  return pairwise_sum(v, h) + pairwise_sum(v + h, n - h);
}

}  // namespace detail

// Average the cluster dynamics over sampled parameter fluctuations.  The
// result carries the same columns as a single evolution, evaluated on the
// given sample grid, with shot count and seed recorded in the metadata.
inline TimeSeries monte_carlo_dynamics(const ClusterDynamicsSpec& spec,
                                       const NoiseModel& noise,
                                       const std::vector<double>& times_us,
                                       int shots, std::uint64_t seed) {
  if (shots < 1) throw ConfigError("monte carlo needs at least one shot");
  spec.validate();
  noise.validate();
  const int n = spec.n_atoms();

  TimeSeries accum;
  std::vector<std::vector<std::vector<double>>> slots;  // [col][sample][shot]

  for (int shot = 0; shot < shots; ++shot) {
    const ShotSample sample =
        sample_shot(noise, n, seed, static_cast<std::uint64_t>(shot));

    ClusterDynamicsSpec perturbed = spec;
    perturbed.per_atom_rabi_mhz.resize(static_cast<size_t>(n));
    perturbed.per_atom_detuning_mhz.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      const size_t is = static_cast<size_t>(i);
      perturbed.per_atom_rabi_mhz[is] =
          spec.effective_rabi(i) * sample.rabi_scale;
      perturbed.per_atom_detuning_mhz[is] = spec.effective_detuning(i) +
                                            sample.doppler_detuning_mhz[is] +
                                            sample.stark_offset_mhz;
      perturbed.positions_um[is] =
          perturbed.positions_um[is] + sample.position_offsets_um[is];
    }

    const TimeSeries run =
        evolve_sampled(perturbed, QuantumState::ground(n), times_us);
    if (shot == 0) {
      accum = run;
      slots.assign(run.columns.size(),
                   std::vector<std::vector<double>>(
                       run.times_us.size(),
                       std::vector<double>(static_cast<size_t>(shots), 0.0)));
    }
    for (size_t c = 0; c < run.columns.size(); ++c)
      for (size_t s = 0; s < run.times_us.size(); ++s)
        slots[c][s][static_cast<size_t>(shot)] = run.values[c][s];
  }

  for (size_t c = 0; c < accum.columns.size(); ++c)
    for (size_t s = 0; s < accum.times_us.size(); ++s)
      accum.values[c][s] =
          detail::pairwise_sum(slots[c][s].data(), slots[c][s].size()) /
          static_cast<double>(shots);

  accum.metadata["shots"] = std::to_string(shots);
  accum.metadata["seed"] = std::to_string(seed);
  return accum;
}

namespace detail {

// Thermal velocity scale: kB divided by the mass of a rubidium-85 atom,
// in (um/us)^2 per uK, so that sigma_v = sqrt(kKBOverM85 * T).
inline constexpr double kKBOverM85 = 9.79192e-5;

// Single-beam Gaussian trap around the origin, beam axis along z.  All
// energies are expressed in uK (divided by kB), lengths in um.
struct GaussianTrap {
  double waist_um = 1.45;
  double rayleigh_um = 8.28;
  double depth_uk = 1000.0;

  static GaussianTrap from_array(const TrapArray& array) {
    GaussianTrap trap;
    trap.waist_um = array.trap_waist_um;
    trap.depth_uk = array.trap_depth_uK;
    const double lambda_um = array.trap_wavelength_nm * 1e-3;
    if (!(lambda_um > 0.0) || !(trap.waist_um > 0.0) || !(trap.depth_uk > 0.0))
      throw ConfigError("trap geometry must be positive to model recapture");
    trap.rayleigh_um = M_PI * trap.waist_um * trap.waist_um / lambda_um;
    return trap;
  }

  // Local intensity relative to the focus, in (0, 1].
  double intensity_fraction(const Vec3& p) const {
    const double s = 1.0 + (p.z / rayleigh_um) * (p.z / rayleigh_um);
    const double rho2 = p.x * p.x + p.y * p.y;
    return std::exp(-2.0 * rho2 / (waist_um * waist_um * s)) / s;
  }

  Vec3 intensity_gradient(const Vec3& p) const {
    const double zr2 = rayleigh_um * rayleigh_um;
    const double s = 1.0 + p.z * p.z / zr2;
    const double w2s = waist_um * waist_um * s;
    const double rho2 = p.x * p.x + p.y * p.y;
    const double g = std::exp(-2.0 * rho2 / w2s) / s;
    const double ds_dz = 2.0 * p.z / zr2;
    Vec3 grad;
    grad.x = g * (-4.0 * p.x / w2s);
    grad.y = g * (-4.0 * p.y / w2s);
    grad.z = g * ds_dz * (2.0 * rho2 / (w2s * s) - 1.0 / s);
    return grad;
  }

  // Potential energy of a trapped ground-state atom, zero at the focus.
  double ground_potential_uk(const Vec3& p) const {
    return depth_uk * (1.0 - intensity_fraction(p));
  }
};

inline double kinetic_energy_uk(const Vec3& v) {
  return (v.x * v.x + v.y * v.y + v.z * v.z) / (2.0 * kKBOverM85);
}

// One kick-drift-kick step; accel must be a function of position only.
template <typename AccelFn>
inline void leapfrog_step(Vec3& pos, Vec3& vel, double dt,
                          const AccelFn& accel) {
  const Vec3 a0 = accel(pos);
  vel.x += 0.5 * dt * a0.x;
  vel.y += 0.5 * dt * a0.y;
  vel.z += 0.5 * dt * a0.z;
  pos.x += dt * vel.x;
  pos.y += dt * vel.y;
  pos.z += dt * vel.z;
  const Vec3 a1 = accel(pos);
  vel.x += 0.5 * dt * a1.x;
  vel.y += 0.5 * dt * a1.y;
  vel.z += 0.5 * dt * a1.z;
}

}  // namespace detail

// Ratio of the ponderomotive hill felt by a quasi-free Rydberg electron to
// the ground-state trap depth at the default 797.3 nm trap light.  The
// electron's polarizability is -1/omega^2 in atomic units (about -306 a.u.
// here) while the ground state, two-odd nm red of the D1 line, is pulled
// with roughly +22700 a.u., so the physical hill is about 1.4% of the trap
// depth.  The default scale of 1.0 instead models a fully inverted trap,
// the harsher common convention for loss estimates.
inline constexpr double kPhysicalHillScale = 0.0135;

// Probability that an atom is still bound after one release-and-recapture
// detection cycle.  Initial conditions are thermal in the harmonic
// approximation of the trap bottom; the traps are dark for release_time_us
// of free flight.  A ground-state atom is then simply re-trapped and kept
// iff its total energy is below the trap depth.  A Rydberg atom instead
// sees the restored trap light as a repulsive ponderomotive hill (the
// inverted trap profile scaled by ponderomotive_scale) until it decays
// back to the ground state, which ejects most of them.
inline double recapture_probability(const TrapArray& array,
                                    const DetectionModel& det,
                                    const NoiseModel& noise, AtomState state,
                                    int trials, std::uint64_t seed,
                                    double ponderomotive_scale = 1.0) {
  if (trials < 1) throw ConfigError("recapture needs at least one trial");
  det.validate();
  noise.validate();
  if (!(ponderomotive_scale >= 0.0))
    throw ConfigError("ponderomotive scale must be non-negative");

  const detail::GaussianTrap trap = detail::GaussianTrap::from_array(array);
  const double temp = noise.temperature_uk;
  // Harmonic widths at the trap bottom; the axial curvature is set by the
  // Rayleigh length and is a factor sqrt(2) softer per unit length.
  const double sigma_rho = trap.waist_um * std::sqrt(temp / (4.0 * trap.depth_uk));
  const double sigma_z =
      trap.rayleigh_um * std::sqrt(temp / (2.0 * trap.depth_uk));
  const double sigma_v = std::sqrt(detail::kKBOverM85 * temp);

  const auto anti_trap_accel = [&](const Vec3& p) {
    const Vec3 grad = trap.intensity_gradient(p);
    const double f = -ponderomotive_scale * detail::kKBOverM85 * trap.depth_uk;
    return Vec3{f * grad.x, f * grad.y, f * grad.z};
  };

  constexpr double kStepUs = 0.1;
  constexpr double kHorizonUs = 600.0;  // survival past this is ~certain loss

  long recaptured = 0;
  for (int trial = 0; trial < trials; ++trial) {
    rng::Stream stream(rng::derive(seed, static_cast<std::uint64_t>(trial)));
    Vec3 pos{stream.gaussian(0.0, sigma_rho), stream.gaussian(0.0, sigma_rho),
             stream.gaussian(0.0, sigma_z)};
    Vec3 vel{stream.gaussian(0.0, sigma_v), stream.gaussian(0.0, sigma_v),
             stream.gaussian(0.0, sigma_v)};

    // Ballistic flight while the traps are off.
    pos.x += vel.x * det.release_time_us;
    pos.y += vel.y * det.release_time_us;
    pos.z += vel.z * det.release_time_us;

    bool bound_check_pending = true;
    if (state == AtomState::rydberg) {
      const double decay_us = stream.exponential(det.rydberg_decay_rate);
      if (decay_us > det.release_time_us) {
        // Ride the ponderomotive hill from trap restoration until decay.
        double t = det.release_time_us;
        const double t_end =
            std::min(decay_us, det.release_time_us + kHorizonUs);
        bool ejected = false;
        while (t < t_end) {
          const double dt = std::min(kStepUs, t_end - t);
          detail::leapfrog_step(pos, vel, dt, anti_trap_accel);
          t += dt;
          // Once the atom moves outward with more kinetic energy than the
          // remaining light could ever reclaim, it cannot be recaptured:
          // the hill only accelerates it further out.
          const double g = trap.intensity_fraction(pos);
          const bool outward =
              pos.x * vel.x + pos.y * vel.y + pos.z * vel.z > 0.0;
          if (outward && detail::kinetic_energy_uk(vel) >
                             10.0 * trap.depth_uk * std::max(g, 1e-300)) {
            ejected = true;
            break;
          }
        }
        if (ejected) bound_check_pending = false;
      }
    }

    if (bound_check_pending) {
      const double energy =
          detail::kinetic_energy_uk(vel) + trap.ground_potential_uk(pos);
      if (energy < trap.depth_uk) ++recaptured;
    }
  }
  return static_cast<double>(recaptured) / static_cast<double>(trials);
}

// Static map between true and observed excitation probabilities.  Every
// excitation indicator (per-site populations and the k >= 1 count bins) is
// scaled by the combined detection factor; the zero-count bin is rebuilt
// from the remaining probability.  The inverse direction clips into [0, 1]
// and reports how many samples needed clipping.
inline TimeSeries static_correction(const TimeSeries& raw,
                                    const DetectionModel& det,
                                    CorrectionDirection direction) {
  det.validate();
  const double factor = (1.0 - det.false_negative) * det.prep_fidelity *
                        (1.0 - det.sequence_loss);
  if (!(factor > 0.0) && direction == CorrectionDirection::inverse)
    throw ConfigError("detection chain is fully opaque; cannot invert");

  TimeSeries out = raw;
  long clipped = 0;
  if (factor == 1.0) {
    // Nothing to undo; skip even the zero-bin rebuild so the map is the
    // exact identity down to the last bit.
    out.metadata["correction"] =
        direction == CorrectionDirection::forward ? "forward" : "inverse";
    out.metadata["correction_factor"] = "1";
    if (direction == CorrectionDirection::inverse)
      out.metadata["clipped_samples"] = "0";
    return out;
  }
  const auto apply = [&](std::vector<double>& column) {
    for (double& v : column) {
      double mapped = direction == CorrectionDirection::forward ? v * factor
                                                                : v / factor;
      if (direction == CorrectionDirection::inverse) {
        if (mapped < 0.0 || mapped > 1.0) ++clipped;
        mapped = std::clamp(mapped, 0.0, 1.0);
      }
      v = mapped;
    }
  };

  for (size_t c = 0; c < out.columns.size(); ++c) {
    const std::string& name = out.columns[c];
    if (name.rfind("p_site_", 0) == 0) apply(out.values[c]);
  }
  const int n = out.n_atoms;
  if (n > 0 && out.has_column(TimeSeries::count_column(0))) {
    for (int k = 1; k <= n; ++k) {
      const std::string name = TimeSeries::count_column(k);
      if (!out.has_column(name)) continue;
      for (size_t c = 0; c < out.columns.size(); ++c)
        if (out.columns[c] == name) apply(out.values[c]);
    }
    // Rebuild the zero-count bin so the distribution stays normalized.
    for (size_t c = 0; c < out.columns.size(); ++c) {
      if (out.columns[c] != TimeSeries::count_column(0)) continue;
      for (size_t s = 0; s < out.values[c].size(); ++s) {
        double rest = 0.0;
        for (int k = 1; k <= n; ++k) {
          const std::string name = TimeSeries::count_column(k);
          for (size_t cc = 0; cc < out.columns.size(); ++cc)
            if (out.columns[cc] == name) rest += out.values[cc][s];
        }
        out.values[c][s] = std::clamp(1.0 - rest, 0.0, 1.0);
      }
    }
  }

  out.metadata["correction"] =
      direction == CorrectionDirection::forward ? "forward" : "inverse";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", factor);
  out.metadata["correction_factor"] = buf;
  if (direction == CorrectionDirection::inverse)
    out.metadata["clipped_samples"] = std::to_string(clipped);
  return out;
}

}  // namespace tweezersim
