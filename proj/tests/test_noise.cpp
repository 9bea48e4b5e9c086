#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "tweezersim/analysis.hpp"
#include "tweezersim/dynamics.hpp"
#include "tweezersim/errors.hpp"
#include "tweezersim/lattice.hpp"
#include "tweezersim/noise.hpp"

using namespace tweezersim;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

std::vector<double> uniform_times(double t_max, size_t n) {
  std::vector<double> t(n);
  for (size_t i = 0; i < n; ++i)
    t[i] = t_max * static_cast<double>(i) / static_cast<double>(n - 1);
  return t;
}

NoiseModel quiet_noise() {
  NoiseModel noise;
  noise.temperature_uk = 0.0;
  noise.doppler_width_mhz = 0.0;
  noise.power_fluct_480 = 0.0;
  noise.power_fluct_780 = 0.0;
  noise.rabi_jitter_mhz = 0.0;
  noise.stark_jitter_mhz = 0.0;
  noise.pos_sigma_radial_um = 0.0;
  noise.pos_sigma_axial_um = 0.0;
  return noise;
}

double sample_stddev(const std::vector<double>& xs) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return std::sqrt(var / static_cast<double>(xs.size() - 1));
}

ClusterDynamicsSpec single_atom(double rabi, double damping) {
  ClusterDynamicsSpec spec;
  spec.positions_um = {Vec3{0.0, 0.0, 0.0}};
  spec.params.rabi_mhz = rabi;
  spec.params.damping_per_us = damping;
  return spec;
}

}  // namespace

TEST_CASE("zero widths sample to an exactly zero fluctuation") {
  const ShotSample s = sample_shot(quiet_noise(), 3, 42, 7);
  for (double d : s.doppler_detuning_mhz) CHECK(d == 0.0);
  CHECK(s.rabi_scale == 1.0);
  CHECK(s.stark_offset_mhz == 0.0);
  for (const Vec3& p : s.position_offsets_um) {
    CHECK(p.x == 0.0);
    CHECK(p.y == 0.0);
    CHECK(p.z == 0.0);
  }
}

TEST_CASE("samples are reproducible and distinct across shots") {
  const NoiseModel noise;
  const ShotSample a = sample_shot(noise, 2, 11, 5);
  const ShotSample b = sample_shot(noise, 2, 11, 5);
  CHECK(a.doppler_detuning_mhz == b.doppler_detuning_mhz);
  CHECK(a.rabi_scale == b.rabi_scale);
  CHECK(a.stark_offset_mhz == b.stark_offset_mhz);

  const ShotSample c = sample_shot(noise, 2, 11, 6);
  CHECK(a.doppler_detuning_mhz != c.doppler_detuning_mhz);
}

TEST_CASE("sampled widths reproduce the configured spreads") {
  const NoiseModel noise;
  const int shots = 100000;
  std::vector<double> doppler(shots), axial(shots), scale(shots);
  for (int i = 0; i < shots; ++i) {
    const ShotSample s =
        sample_shot(noise, 1, 2024, static_cast<std::uint64_t>(i));
    doppler[static_cast<size_t>(i)] = s.doppler_detuning_mhz[0];
    axial[static_cast<size_t>(i)] = s.position_offsets_um[0].z;
    scale[static_cast<size_t>(i)] = s.rabi_scale;
  }
  CHECK_THAT(sample_stddev(doppler), WithinRel(0.170, 0.01));
  CHECK_THAT(sample_stddev(axial), WithinRel(2.4, 0.02));
  CHECK_THAT(sample_stddev(scale), WithinRel(noise.rabi_scale_sigma(), 0.02));
}

TEST_CASE("one quiet shot reproduces the bare evolution exactly") {
  const ClusterDynamicsSpec spec = single_atom(0.4, 0.1);
  const std::vector<double> times = uniform_times(4.0, 81);
  const TimeSeries bare = evolve_sampled(spec, QuantumState::ground(1), times);
  const TimeSeries avg =
      monte_carlo_dynamics(spec, quiet_noise(), times, 1, 99);
  REQUIRE(avg.columns == bare.columns);
  for (size_t c = 0; c < bare.columns.size(); ++c)
    for (size_t s = 0; s < times.size(); ++s)
      REQUIRE(avg.values[c][s] == bare.values[c][s]);
  CHECK(avg.metadata.at("shots") == "1");
}

TEST_CASE("default fluctuations add damping beyond intrinsic scattering") {
  const ClusterDynamicsSpec spec = single_atom(0.33, 0.08);
  const std::vector<double> times = uniform_times(5.0, 101);
  const TimeSeries avg =
      monte_carlo_dynamics(spec, NoiseModel{}, times, 300, 7001);
  const RabiFit fit = fit_rabi(avg, "p_site_0");
  // Each detuned shot oscillates at its generalized frequency
  // sqrt(rabi^2 + delta^2), so the fitted value sits a little above the
  // bare drive.
  CHECK_THAT(fit.rabi_mhz, WithinAbs(0.33, 0.04));
  // The Doppler spread dominates the extra damping; power and Stark
  // jitter add a little more.  The bounds keep the result clearly above
  // the intrinsic 0.08 /us without pinning the exact ensemble average.
  CHECK(fit.damping_per_us > 0.13);
  CHECK(fit.damping_per_us < 0.37);
}

TEST_CASE("position jitter shifts a pair's fitted damping by geometry") {
  ClusterDynamicsSpec spec;
  spec.positions_um = {Vec3{0.0, 0.0, 0.0}, Vec3{9.899, 0.0, 0.0}};
  spec.params.rabi_mhz = 0.33;
  spec.params.damping_per_us = 0.08;
  spec.interaction.c6_mhz_um6 = 0.075 * std::pow(9.899, 6.0);

  NoiseModel radial = quiet_noise();
  radial.pos_sigma_radial_um = 0.3;
  NoiseModel axial = quiet_noise();
  axial.pos_sigma_axial_um = 2.4;

  const std::vector<double> times = uniform_times(5.0, 101);
  const auto fitted_damping = [&](const NoiseModel& noise) {
    const TimeSeries avg = monte_carlo_dynamics(spec, noise, times, 300, 5150);
    return fit_rabi(avg, "p_site_0").damping_per_us;
  };

  // The static coupling alone already distorts the pair away from a clean
  // single-atom oscillation, which the fit absorbs as extra damping.
  const double base = fitted_damping(quiet_noise());
  CHECK(base > 0.09);

  // In-plane jitter modulates the separation symmetrically, and the 1/R^6
  // convexity then raises both the mean coupling and its spread; both
  // effects push the fitted damping up.
  CHECK(fitted_damping(radial) > base + 0.002);

  // Out-of-plane jitter can only lengthen an in-plane separation, so the
  // mean coupling weakens.  That relaxes the interaction distortion faster
  // than the added spread dephases, and the fitted damping drops.
  CHECK(fitted_damping(axial) < base - 0.005);
}

TEST_CASE("fluctuations lower the averaged oscillation peak") {
  const ClusterDynamicsSpec spec = single_atom(0.33, 0.08);
  const std::vector<double> times = uniform_times(5.0, 101);
  const TimeSeries clean =
      monte_carlo_dynamics(spec, quiet_noise(), times, 1, 7001);
  const std::vector<double>& ref = clean.column("p_site_0");
  const double reference = *std::max_element(ref.begin(), ref.end());

  // Detuned shots never reach full population transfer, so the ensemble
  // average peaks visibly below the quiet trace.
  const TimeSeries avg =
      monte_carlo_dynamics(spec, NoiseModel{}, times, 200, 7001);
  const std::vector<double>& col = avg.column("p_site_0");
  CHECK(*std::max_element(col.begin(), col.end()) < reference - 0.05);

  // Averaging cannot push any probability out of [0, 1].
  for (size_t c = 0; c < avg.columns.size(); ++c)
    for (double v : avg.values[c]) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
}

TEST_CASE("cold atoms with instant readout are always recaptured") {
  TrapArray array;
  DetectionModel det;
  det.release_time_us = 0.0;
  NoiseModel noise;
  noise.temperature_uk = 0.0;
  const double p =
      recapture_probability(array, det, noise, AtomState::ground, 500, 1);
  CHECK(p == 1.0);
}

TEST_CASE("instant decay makes an excited atom look like a ground atom") {
  TrapArray array;
  DetectionModel det;
  NoiseModel noise;
  const double ground =
      recapture_probability(array, det, noise, AtomState::ground, 4000, 77);
  DetectionModel instant = det;
  instant.rydberg_decay_rate = 1e12;
  const double rydberg =
      recapture_probability(array, instant, noise, AtomState::rydberg, 4000, 77);
  CHECK(rydberg == ground);
}

TEST_CASE("recapture grows with the decay rate") {
  TrapArray array;
  NoiseModel noise;
  double previous = -1.0;
  for (double rate : {0.002, 0.005, 0.02}) {
    DetectionModel det;
    det.rydberg_decay_rate = rate;
    const double p =
        recapture_probability(array, det, noise, AtomState::rydberg, 20000, 31);
    CHECK(p > previous);
    previous = p;
  }
}

TEST_CASE("excited-state survival falls with level and hill strength") {
  TrapArray array;  // 1.45 um waist, 1 mK depth, 797.3 nm light
  NoiseModel noise;

  DetectionModel level57;  // default decay rate, 0.005 /us
  DetectionModel level87 = level57;
  // A higher principal quantum number lives ~n^3 longer, so fewer atoms
  // decay back in time to be recaptured.
  level87.rydberg_decay_rate = 0.005 * std::pow(57.0 / 87.0, 3.0);

  std::vector<double> p57s, p87s;
  for (double scale : {0.0, kPhysicalHillScale, 1.0}) {
    p57s.push_back(recapture_probability(array, level57, noise,
                                         AtomState::rydberg, 20000, 420,
                                         scale));
    p87s.push_back(recapture_probability(array, level87, noise,
                                         AtomState::rydberg, 20000, 420,
                                         scale));
  }

  // Survival falls monotonically as the hill grows from absent to a fully
  // inverted trap, and the longer-lived level always survives less.
  for (size_t i = 0; i < p57s.size(); ++i) {
    if (i > 0) CHECK(p57s[i] < p57s[i - 1]);
    CHECK(p87s[i] < p57s[i]);
  }

  // At the physical hill strength the higher level lands in the measured
  // few-percent band.
  CHECK_THAT(p87s[1], WithinAbs(0.06, 0.04));
  // The lower level cannot reach its measured ~0.19 within this model:
  // even with no hill at all, thermal escape during free flight plus the
  // decay race cap survival near 0.13 at 52 uK, and any hill convention
  // only lowers it from there.
  CHECK_THAT(p57s[0], WithinAbs(0.134, 0.02));
  CHECK_THAT(p57s[1], WithinAbs(0.10, 0.04));
}

TEST_CASE("trajectory integration conserves energy in a static trap") {
  const detail::GaussianTrap trap = detail::GaussianTrap::from_array(TrapArray{});
  const auto trap_accel = [&](const Vec3& p) {
    const Vec3 grad = trap.intensity_gradient(p);
    const double f = detail::kKBOverM85 * trap.depth_uk;
    return Vec3{f * grad.x, f * grad.y, f * grad.z};
  };
  Vec3 pos{0.2, -0.1, 1.0};
  Vec3 vel{0.03, 0.02, 0.05};
  const double initial =
      detail::kinetic_energy_uk(vel) + trap.ground_potential_uk(pos);
  for (int step = 0; step < 3000; ++step) {
    detail::leapfrog_step(pos, vel, 0.1, trap_accel);
    const double energy =
        detail::kinetic_energy_uk(vel) + trap.ground_potential_uk(pos);
    REQUIRE(std::abs(energy - initial) < 0.01 * initial);
  }
}

TEST_CASE("a fully excited trace reads out at the detection ceiling") {
  TimeSeries trace;
  trace.n_atoms = 1;
  trace.times_us = {0.0, 1.0};
  trace.columns = {"p_site_0", "p_k0", "p_k1"};
  trace.values = {{1.0, 1.0}, {0.0, 0.0}, {1.0, 1.0}};

  DetectionModel det;
  det.false_negative = 0.19;
  det.prep_fidelity = 1.0;
  det.sequence_loss = 0.0;
  const TimeSeries seen =
      static_correction(trace, det, CorrectionDirection::forward);
  CHECK_THAT(seen.column("p_site_0")[0], WithinAbs(0.81, 1e-12));
  CHECK_THAT(seen.column("p_k1")[1], WithinAbs(0.81, 1e-12));
  CHECK_THAT(seen.column("p_k0")[1], WithinAbs(0.19, 1e-12));
}

TEST_CASE("a trivial detection chain is the identity map") {
  const ClusterDynamicsSpec spec = single_atom(0.5, 0.0);
  const TimeSeries raw = evolve(spec, QuantumState::ground(1), 3.0, 0.01, 10);
  DetectionModel det;
  det.false_negative = 0.0;
  det.prep_fidelity = 1.0;
  det.sequence_loss = 0.0;
  const TimeSeries mapped =
      static_correction(raw, det, CorrectionDirection::forward);
  for (size_t c = 0; c < raw.columns.size(); ++c)
    for (size_t s = 0; s < raw.times_us.size(); ++s)
      REQUIRE(mapped.values[c][s] == raw.values[c][s]);
}

TEST_CASE("correction round trip is the identity where unclipped") {
  ClusterDynamicsSpec spec;
  spec.positions_um = {Vec3{0.0, 0.0, 0.0}, Vec3{7.0, 0.0, 0.0}};
  spec.params.rabi_mhz = 0.32;
  spec.interaction.c6_mhz_um6 = 24.0 * std::pow(7.0, 6.0);
  // The -24 MHz nearest-neighbour shift needs a step well under its
  // oscillation period.
  const TimeSeries raw =
      evolve(spec, QuantumState::ground(2), 4.0, 0.0008, 250);

  const DetectionModel det;  // 0.19 / 0.96 / 0.05 defaults
  const TimeSeries forward =
      static_correction(raw, det, CorrectionDirection::forward);
  const TimeSeries back =
      static_correction(forward, det, CorrectionDirection::inverse);
  CHECK(back.metadata.at("clipped_samples") == "0");
  for (size_t c = 0; c < raw.columns.size(); ++c)
    for (size_t s = 0; s < raw.times_us.size(); ++s)
      REQUIRE_THAT(back.values[c][s], WithinAbs(raw.values[c][s], 1e-12));
}

TEST_CASE("inverting an impossible observation clips and reports it") {
  TimeSeries trace;
  trace.n_atoms = 1;
  trace.times_us = {0.0};
  trace.columns = {"p_site_0", "p_k0", "p_k1"};
  trace.values = {{0.95}, {0.05}, {0.95}};

  const DetectionModel det;  // ceiling (1-0.19)*0.96*(1-0.05) = 0.739
  const TimeSeries truth =
      static_correction(trace, det, CorrectionDirection::inverse);
  CHECK(truth.column("p_site_0")[0] == 1.0);
  CHECK(std::stol(truth.metadata.at("clipped_samples")) >= 1);
}

TEST_CASE("noise and detection inputs are validated") {
  NoiseModel bad;
  bad.temperature_uk = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  DetectionModel det;
  det.false_negative = 1.2;
  CHECK_THROWS_AS(det.validate(), ConfigError);

  const ClusterDynamicsSpec spec = single_atom(0.4, 0.0);
  CHECK_THROWS_AS(
      monte_carlo_dynamics(spec, NoiseModel{}, {0.0, 1.0}, 0, 1),
      ConfigError);
  CHECK_THROWS_AS(recapture_probability(TrapArray{}, DetectionModel{},
                                        NoiseModel{}, AtomState::ground, 0, 1),
                  ConfigError);
}
