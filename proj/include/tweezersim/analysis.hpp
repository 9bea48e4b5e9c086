#pragma once

// Extraction of physical parameters from simulated traces: damped Rabi fits
// per site, the illumination profile across the array, and the collective
// enhancement of the oscillation frequency with atom number.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tweezersim/dynamics.hpp"
#include "tweezersim/errors.hpp"
#include "tweezersim/geometry.hpp"
#include "tweezersim/lattice.hpp"

namespace tweezersim {

namespace detail {

// Model functions fill the prediction for the whole sample grid at once;
// the grid itself lives in the closure.  This lets a model run an ODE solve
// per parameter set instead of per sample point.
using VectorModelFn =
    std::function<void(const std::vector<double>&, std::vector<double>&)>;

struct LeastSquaresOptions {
  int max_iterations = 200;
  double rel_cost_tol = 1e-10;
  double lambda_init = 1e-3;
  double fd_rel_step = 1e-6;
};

struct LeastSquaresResult {
  std::vector<double> params;
  std::vector<double> errors;  // 1-sigma, from the residual variance
  double cost = 0.0;           // sum of squared residuals at the optimum
  int iterations = 0;
  bool converged = false;
};

// Damped Gauss-Newton with Marquardt scaling and a forward-difference
// Jacobian.  A model may throw FitError for an infeasible parameter set;
// trial steps into such territory are treated as uphill.
inline LeastSquaresResult levenberg_marquardt(
    const VectorModelFn& model, const std::vector<double>& ys,
    std::vector<double> p, const LeastSquaresOptions& opt = {}) {
  if (ys.size() < p.size()) throw FitError("fewer samples than fit parameters");

  const Eigen::Index n = static_cast<Eigen::Index>(ys.size());
  const Eigen::Index k = static_cast<Eigen::Index>(p.size());

  std::vector<double> prediction(ys.size()), trial_prediction(ys.size());
  const auto cost_of = [&](const std::vector<double>& pred) {
    double c = 0.0;
    for (size_t i = 0; i < ys.size(); ++i) {
      const double r = ys[i] - pred[i];
      if (!std::isfinite(r))
        throw FitError("model produced a non-finite value during fitting");
      c += r * r;
    }
    return c;
  };

  model(p, prediction);
  double cost = cost_of(prediction);

  // Noise floor for stall detection: residuals this far below the data's
  // own energy are limited by model evaluation noise, not misfit.
  double data_scale = 0.0;
  for (double y : ys) data_scale += y * y;
  const double cost_floor = 1e-12 * std::max(data_scale, 1.0);

  Eigen::MatrixXd jac(n, k);
  const auto fill_jacobian = [&](const std::vector<double>& at,
                                 const std::vector<double>& base_pred) {
    std::vector<double> p_step(at), shifted(ys.size());
    for (Eigen::Index j = 0; j < k; ++j) {
      const size_t js = static_cast<size_t>(j);
      double h = opt.fd_rel_step * std::max(std::abs(at[js]), 1e-8);
      p_step = at;
      p_step[js] += h;
      try {
        model(p_step, shifted);
      } catch (const FitError&) {
        h = -h;  // fall back to a backward difference at a feasibility edge
        p_step[js] = at[js] + h;
        model(p_step, shifted);
      }
      for (Eigen::Index i = 0; i < n; ++i)
        jac(i, j) =
            -(shifted[static_cast<size_t>(i)] - base_pred[static_cast<size_t>(i)]) / h;
    }
  };

  double lambda = opt.lambda_init;
  LeastSquaresResult out;

  for (; out.iterations < opt.max_iterations; ++out.iterations) {
    fill_jacobian(p, prediction);

    Eigen::VectorXd r(n);
    for (Eigen::Index i = 0; i < n; ++i)
      r(i) = ys[static_cast<size_t>(i)] - prediction[static_cast<size_t>(i)];
    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    const Eigen::VectorXd jtr = -jac.transpose() * r;

    bool accepted = false;
    for (int attempt = 0; attempt < 60; ++attempt) {
      Eigen::MatrixXd damped = jtj;
      for (Eigen::Index j = 0; j < k; ++j)
        damped(j, j) += lambda * std::max(jtj(j, j), 1e-12);
      const Eigen::VectorXd delta = damped.ldlt().solve(jtr);
      if (!delta.allFinite()) {
        lambda = std::min(lambda * 2.0, 1e12);
        continue;
      }
      std::vector<double> p_trial = p;
      for (Eigen::Index j = 0; j < k; ++j)
        p_trial[static_cast<size_t>(j)] += delta(j);
      double trial_cost;
      try {
        model(p_trial, trial_prediction);
        trial_cost = cost_of(trial_prediction);
      } catch (const FitError&) {
        lambda = std::min(lambda * 2.0, 1e12);
        continue;
      }
      if (trial_cost <= cost) {
        const double drop = cost - trial_cost;
        p = std::move(p_trial);
        prediction = trial_prediction;
        const double prev = cost;
        cost = trial_cost;
        lambda = std::max(lambda / 3.0, 1e-12);
        accepted = true;
        if (drop <= opt.rel_cost_tol * std::max(prev, 1e-30)) out.converged = true;
        break;
      }
      lambda = std::min(lambda * 2.0, 1e12);
    }
    if (!accepted) {
      // No downhill step at any damping; accept the stall as convergence
      // only when the residuals are already negligible.
      out.converged = out.converged || cost < cost_floor;
      break;
    }
    if (out.converged) break;
  }

  out.params = p;
  out.cost = cost;

  // Parameter errors from the residual variance and the curvature at the
  // optimum.  Degenerate directions surface as infinite errors.
  out.errors.assign(p.size(), 0.0);
  if (n > k) {
    fill_jacobian(p, prediction);
    const double variance = cost / static_cast<double>(n - k);
    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    const Eigen::MatrixXd cov =
        jtj.ldlt().solve(Eigen::MatrixXd::Identity(k, k));
    for (Eigen::Index j = 0; j < k; ++j) {
      const double v = variance * cov(j, j);
      out.errors[static_cast<size_t>(j)] =
          std::isfinite(v) && v >= 0.0
              ? std::sqrt(v)
              : std::numeric_limits<double>::infinity();
    }
  }
  return out;
}

// Seed for oscillation fits: the discrete spectrum evaluated on a dense
// frequency grid (the zero-padding limit), peak refined with a parabola.
// Returns the peak frequency and the implied oscillation amplitude.
struct SpectralPeak {
  double frequency_mhz = 0.0;
  double amplitude = 0.0;
};

inline SpectralPeak spectral_peak(const std::vector<double>& t,
                                  const std::vector<double>& y) {
  const size_t n = t.size();
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(n);

  double min_dt = std::numeric_limits<double>::infinity();
  for (size_t i = 1; i < n; ++i) min_dt = std::min(min_dt, t[i] - t[i - 1]);
  const double span = t.back() - t.front();
  if (!(span > 0.0) || !(min_dt > 0.0))
    throw FitError("time grid must be strictly increasing");

  const double f_lo = 0.25 / span, f_hi = 0.5 / min_dt;
  const int m = 4096;
  std::vector<double> power(m);
  double best = 0.0;
  int best_idx = 0;
  for (int j = 0; j < m; ++j) {
    const double f = f_lo + (f_hi - f_lo) * j / (m - 1);
    std::complex<double> acc = 0.0;
    for (size_t i = 0; i < n; ++i)
      acc += (y[i] - mean) *
             std::exp(std::complex<double>(0.0, -2.0 * M_PI * f * t[i]));
    power[j] = std::norm(acc);
    if (power[j] > best) {
      best = power[j];
      best_idx = j;
    }
  }
  double refined = f_lo + (f_hi - f_lo) * best_idx / (m - 1);
  if (best_idx > 0 && best_idx + 1 < m) {
    const double denom =
        power[best_idx - 1] - 2.0 * power[best_idx] + power[best_idx + 1];
    if (denom != 0.0) {
      const double offset =
          0.5 * (power[best_idx - 1] - power[best_idx + 1]) / denom;
      refined += offset * (f_hi - f_lo) / (m - 1);
    }
  }
  SpectralPeak peak;
  peak.frequency_mhz = refined;
  peak.amplitude = 2.0 * std::sqrt(best) / static_cast<double>(n);
  return peak;
}

}  // namespace detail

// Damped oscillation parameters extracted from an excitation trace.  The fit
// model is the numerically integrated two-level evolution at resonance with
// total damping split evenly between decay and dephasing (the library
// default), scaled and shifted:  y(t) = offset + amplitude * P_r(t).
struct RabiFit {
  double rabi_mhz = 0.0;
  double damping_per_us = 0.0;
  double amplitude = 0.0;
  double offset = 0.0;
  double rabi_err_mhz = 0.0;
  double damping_err_per_us = 0.0;
  double amplitude_err = 0.0;
  double offset_err = 0.0;
  double residual_rms = 0.0;
  int iterations = 0;
};

namespace detail {

// Reference trace of a resonantly driven, damped two-level atom on the
// given grid (which must start at zero and increase).
inline void bloch_trace(double rabi_mhz, double damping_per_us,
                        const std::vector<double>& times_us,
                        std::vector<double>& out) {
  ClusterDynamicsSpec spec;
  spec.positions_um = {Vec3{0.0, 0.0, 0.0}};
  spec.params.rabi_mhz = rabi_mhz;
  spec.params.damping_per_us = damping_per_us;
  const TimeSeries series =
      evolve_sampled(spec, QuantumState::ground(1), times_us);
  out = series.column("p_site_0");
}

}  // namespace detail

inline RabiFit fit_rabi(const std::vector<double>& times_us,
                        const std::vector<double>& populations) {
  if (times_us.size() != populations.size())
    throw FitError("time and population lists differ in length");
  if (times_us.size() < 8)
    throw FitError("too few samples for a Rabi fit (need at least 8)");
  for (size_t i = 0; i < times_us.size(); ++i)
    if (!std::isfinite(times_us[i]) || !std::isfinite(populations[i]))
      throw FitError("Rabi fit input contains non-finite values");

  const detail::SpectralPeak peak =
      detail::spectral_peak(times_us, populations);
  if (peak.amplitude < 0.01)
    throw FitError("no spectral peak above the noise floor (strongest "
                   "component has amplitude " +
                   std::to_string(peak.amplitude) + ")");
  const double span = times_us.back() - times_us.front();
  if (span * peak.frequency_mhz < 1.0)
    throw FitError("fit window of " + std::to_string(span) +
                   " us is shorter than one oscillation period at " +
                   std::to_string(peak.frequency_mhz) + " MHz");

  // The integrator needs a grid anchored at zero; results for a shifted
  // window are read off the tail.
  std::vector<double> grid = times_us;
  size_t skip = 0;
  if (grid.front() > 0.0) {
    grid.insert(grid.begin(), 0.0);
    skip = 1;
  }

  const detail::VectorModelFn model = [&grid, skip](
                                          const std::vector<double>& p,
                                          std::vector<double>& out) {
    std::vector<double> trace;
    detail::bloch_trace(std::abs(p[0]), std::abs(p[2]), grid, trace);
    out.resize(grid.size() - skip);
    for (size_t i = skip; i < grid.size(); ++i)
      out[i - skip] = p[3] + p[1] * trace[i];
  };

  const auto [lo_it, hi_it] =
      std::minmax_element(populations.begin(), populations.end());
  const std::vector<double> p0 = {
      peak.frequency_mhz, std::max(*hi_it - *lo_it, 1e-3), 0.05, *lo_it};
  const detail::LeastSquaresResult res =
      detail::levenberg_marquardt(model, populations, p0);
  if (!res.converged)
    throw FitError("Rabi fit did not converge after " +
                   std::to_string(res.iterations) +
                   " iterations (residual sum of squares " +
                   std::to_string(res.cost) + ")");

  RabiFit fit;
  fit.rabi_mhz = std::abs(res.params[0]);
  fit.amplitude = std::abs(res.params[1]);
  fit.damping_per_us = std::abs(res.params[2]);
  fit.offset = res.params[3];
  fit.rabi_err_mhz = res.errors[0];
  fit.amplitude_err = res.errors[1];
  fit.damping_err_per_us = res.errors[2];
  fit.offset_err = res.errors[3];
  fit.residual_rms = std::sqrt(res.cost / static_cast<double>(times_us.size()));
  fit.iterations = res.iterations;
  return fit;
}

inline RabiFit fit_rabi(const TimeSeries& series, const std::string& column) {
  return fit_rabi(series.times_us, series.column(column));
}

// Gaussian illumination profile across the array.  The drive frequency
// scales with the field amplitude, so site Rabi frequencies trace the beam
// as rabi(r) = rabi_max exp(-|r-c|^2 / w^2) and their squares follow the
// intensity profile exp(-2 |r-c|^2 / w^2), which is what gets fitted.
struct BeamFit {
  Vec2 center_um{0.0, 0.0};
  double waist_um = 0.0;  // 1/e^2 intensity radius
  double rabi_max_mhz = 0.0;
  double waist_err_um = 0.0;
  double rabi_max_err_mhz = 0.0;
  double residual_rms_mhz2 = 0.0;  // on the squared-rabi values
  // Set when the sampled patch is too small to pin the waist; the fitted
  // value is then only a lower bound on the true beam size.
  bool waist_is_lower_bound = false;
};

inline BeamFit fit_beam_profile(const std::vector<Vec2>& positions_um,
                                const std::vector<double>& rabi_mhz) {
  if (positions_um.size() != rabi_mhz.size())
    throw FitError("position and rabi lists differ in length");
  if (positions_um.size() < 6)
    throw FitError("too few sites for a beam profile fit (need at least 6)");
  for (double w : rabi_mhz)
    if (!std::isfinite(w) || w < 0.0)
      throw FitError("site rabi frequencies must be finite and non-negative");

  // A collinear site set cannot constrain the transverse beam center.
  {
    const Vec2 a = positions_um.front();
    double cross_max = 0.0, reach = 0.0;
    for (const Vec2& p : positions_um) reach = std::max(reach, (p - a).norm());
    for (size_t i = 1; i < positions_um.size(); ++i) {
      const Vec2 d1 = positions_um[i] - a;
      for (size_t j = i + 1; j < positions_um.size(); ++j) {
        const Vec2 d2 = positions_um[j] - a;
        cross_max = std::max(cross_max, std::abs(d1.x * d2.y - d1.y * d2.x));
      }
    }
    if (cross_max <= 1e-9 * std::max(reach * reach, 1.0))
      throw FitError("sites are collinear; beam center is not constrained");
  }

  std::vector<double> intensity(rabi_mhz.size());
  double peak = 0.0;
  Vec2 peak_pos = positions_um.front();
  for (size_t i = 0; i < rabi_mhz.size(); ++i) {
    intensity[i] = rabi_mhz[i] * rabi_mhz[i];
    if (rabi_mhz[i] > peak) {
      peak = rabi_mhz[i];
      peak_pos = positions_um[i];
    }
  }
  if (peak <= 0.0) throw FitError("all site rabi frequencies vanish");

  double extent = 0.0;
  for (size_t i = 0; i < positions_um.size(); ++i)
    for (size_t j = i + 1; j < positions_um.size(); ++j)
      extent = std::max(extent, (positions_um[i] - positions_um[j]).norm());

  const detail::VectorModelFn model =
      [&positions_um](const std::vector<double>& p, std::vector<double>& out) {
        const double w2 = p[3] * p[3];
        if (!(w2 > 0.0)) throw FitError("waist collapsed to zero");
        out.resize(positions_um.size());
        for (size_t i = 0; i < positions_um.size(); ++i) {
          const double dx = positions_um[i].x - p[1];
          const double dy = positions_um[i].y - p[2];
          out[i] = p[0] * p[0] * std::exp(-2.0 * (dx * dx + dy * dy) / w2);
        }
      };
  const std::vector<double> p0 = {peak, peak_pos.x, peak_pos.y, extent};
  const detail::LeastSquaresResult res =
      detail::levenberg_marquardt(model, intensity, p0);

  BeamFit fit;
  fit.rabi_max_mhz = std::abs(res.params[0]);
  fit.center_um = Vec2{res.params[1], res.params[2]};
  fit.waist_um = std::abs(res.params[3]);
  fit.rabi_max_err_mhz = res.errors[0];
  fit.waist_err_um = res.errors[3];
  fit.waist_is_lower_bound = fit.waist_um > 2.0 * extent;
  fit.residual_rms_mhz2 =
      std::sqrt(res.cost / static_cast<double>(positions_um.size()));
  return fit;
}

inline BeamFit fit_beam_profile(const std::map<SiteIndex, double>& site_rabi,
                                const TrapArray& array) {
  std::vector<Vec2> positions;
  std::vector<double> rabi;
  positions.reserve(site_rabi.size());
  rabi.reserve(site_rabi.size());
  for (const auto& [site, w] : site_rabi) {
    positions.push_back(site_position(array, site));
    rabi.push_back(w);
  }
  return fit_beam_profile(positions, rabi);
}

// Measured oscillation frequencies referenced to the ideal collective
// enhancement: ratio = rabi_N / (sqrt(N) * rabi_1).  The first N=1 entry is
// the baseline and reports ratio 1 with no uncertainty of its own.
struct CollectiveScalingEntry {
  int n_atoms = 0;
  double rabi_mhz = 0.0;
  double rabi_err_mhz = 0.0;
  double ratio = 0.0;
  double ratio_err = 0.0;
};

struct CollectiveScaling {
  double base_rabi_mhz = 0.0;
  double base_rabi_err_mhz = 0.0;
  std::vector<CollectiveScalingEntry> entries;
  double max_abs_deviation = 0.0;  // max |ratio - 1| over all entries
};

inline CollectiveScaling collective_scaling(
    const std::vector<std::pair<int, RabiFit>>& fits) {
  const RabiFit* base = nullptr;
  for (const auto& [n, fit] : fits)
    if (n == 1 && base == nullptr) base = &fit;
  if (base == nullptr)
    throw FitError("collective scaling needs a single-atom reference entry");
  if (base->rabi_mhz <= 0.0)
    throw FitError("single-atom reference frequency must be positive");

  CollectiveScaling out;
  out.base_rabi_mhz = base->rabi_mhz;
  out.base_rabi_err_mhz = base->rabi_err_mhz;
  for (const auto& [n, fit] : fits) {
    if (n < 1) throw FitError("cluster sizes must be positive");
    CollectiveScalingEntry e;
    e.n_atoms = n;
    e.rabi_mhz = fit.rabi_mhz;
    e.rabi_err_mhz = fit.rabi_err_mhz;
    e.ratio = fit.rabi_mhz / (std::sqrt(static_cast<double>(n)) * base->rabi_mhz);
    if (&fit == base) {
      e.ratio_err = 0.0;
    } else {
      const double rel_n =
          fit.rabi_mhz > 0.0 ? fit.rabi_err_mhz / fit.rabi_mhz : 0.0;
      const double rel_1 = base->rabi_err_mhz / base->rabi_mhz;
      e.ratio_err = e.ratio * std::hypot(rel_n, rel_1);
    }
    out.max_abs_deviation =
        std::max(out.max_abs_deviation, std::abs(e.ratio - 1.0));
    out.entries.push_back(e);
  }
  return out;
}

}  // namespace tweezersim
