#pragma once

// Coherent and dissipative dynamics of small clusters of Rydberg-interacting
// atoms.  Each atom is an effective two-level system |g>, |r> driven at Rabi
// frequency Omega; pairs shift each other by a van der Waals interaction
// V = -C6 f(theta) / R^6 when both are excited.
//
// All energies are stored as frequencies E/h in MHz and times in us, so the
// equations of motion carry an explicit 2*pi:  d psi / dt = -i 2 pi H psi.
// A resonantly driven atom then follows P_r(t) = sin^2(pi * rabi * t).

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tweezersim/errors.hpp"
#include "tweezersim/geometry.hpp"

namespace tweezersim {

// Drive and decoherence of the effective two-level transition.
struct ExcitationParams {
  double rabi_mhz = 0.0;      // Omega / 2 pi
  double detuning_mhz = 0.0;  // two-photon detuning delta / 2 pi
  double damping_per_us = 0.0;

  // Share of the damping acting as |r> -> |g> decay; the rest is pure
  // dephasing of the g-r coherence.
  double damping_decay_fraction = 0.5;

  // Detuning from the intermediate state of the two-photon drive and the
  // photon scattering it causes.  The propagation works in the effective
  // two-level picture, so these enter as bookkeeping (the scattering rate is
  // the physical floor for damping_per_us in forward simulations).
  double intermediate_detuning_mhz = 410.0;
  double scattering_rate_per_us = 0.08;

  void validate() const {
    if (rabi_mhz < 0.0) throw ConfigError("rabi frequency must be non-negative");
    if (damping_per_us < 0.0) throw ConfigError("damping must be non-negative");
    if (damping_decay_fraction < 0.0 || damping_decay_fraction > 1.0)
      throw ConfigError("damping decay fraction must lie in [0, 1]");
    if (intermediate_detuning_mhz == 0.0)
      throw ConfigError("intermediate-state detuning must be nonzero");
    if (scattering_rate_per_us < 0.0)
      throw ConfigError("scattering rate must be non-negative");
  }
};

// Van der Waals coupling with optional orientation dependence.  The angular
// factor is a piecewise-constant table over [0, pi/2] (angle against the
// quantization axis, folded); an empty table means isotropic.
struct InteractionModel {
  double c6_mhz_um6 = 0.0;
  std::vector<std::pair<double, double>> angular_factors;  // (angle, scale)
  Vec2 quantization_axis{1.0, 0.0};

  double angular_factor(double theta_rad) const {
    if (angular_factors.empty()) return 1.0;
    double best = angular_factors.front().second;
    double best_dist = std::abs(theta_rad - angular_factors.front().first);
    for (size_t i = 1; i < angular_factors.size(); ++i) {
      const double d = std::abs(theta_rad - angular_factors[i].first);
      if (d < best_dist) {
        best_dist = d;
        best = angular_factors[i].second;
      }
    }
    return best;
  }

  void validate() const {
    if (c6_mhz_um6 < 0.0)
      throw ConfigError("C6 coefficient must be non-negative");
    if (quantization_axis.norm() <= 0.0)
      throw ConfigError("quantization axis must be a nonzero vector");
    for (const auto& [angle, scale] : angular_factors) {
      if (angle < 0.0 || angle > M_PI / 2 + 1e-12)
        throw ConfigError("angular factor bins must lie in [0, pi/2]");
      if (scale < 0.0) throw ConfigError("angular factors must be non-negative");
    }
  }
};

// Pair shift in MHz for two excited atoms.  Positions may carry an axial
// (z) component; the quantization axis lies in the array plane.
inline double pair_interaction(const Vec3& a, const Vec3& b,
                               const InteractionModel& model) {
  model.validate();
  const Vec3 d = b - a;
  const double r = d.norm();
  if (r <= 0.0)
    throw DegeneratePairError("pair interaction requested for coincident atoms");
  const Vec3 axis{model.quantization_axis.x, model.quantization_axis.y, 0.0};
  double c = std::abs(d.dot(axis)) / (r * axis.norm());
  c = std::clamp(c, 0.0, 1.0);
  const double theta = std::acos(c);
  const double r2 = r * r;
  const double r6 = r2 * r2 * r2;
  return -model.c6_mhz_um6 * model.angular_factor(theta) / r6;
}

inline double pair_interaction(const Vec2& a, const Vec2& b,
                               const InteractionModel& model) {
  return pair_interaction(Vec3(a), Vec3(b), model);
}

// Distance below which the pair shift exceeds the drive:
// R_b = (C6_eff / rabi)^(1/6), with both inputs as positive frequencies.
inline double blockade_radius_um(double c6_eff_mhz_um6, double rabi_mhz) {
  if (c6_eff_mhz_um6 <= 0.0 || rabi_mhz <= 0.0)
    throw ConfigError("blockade radius needs positive C6 and rabi inputs");
  return std::pow(c6_eff_mhz_um6 / rabi_mhz, 1.0 / 6.0);
}

// A cluster to propagate: atom positions, shared drive parameters, and the
// interaction model.  Per-atom overrides cover inhomogeneous illumination
// and per-atom detuning offsets.
struct ClusterDynamicsSpec {
  std::vector<Vec3> positions_um;
  ExcitationParams params;
  InteractionModel interaction;
  std::vector<double> per_atom_rabi_mhz;      // empty: use params.rabi_mhz
  std::vector<double> per_atom_detuning_mhz;  // empty: use params.detuning_mhz

  // Replaces every pair coupling with a fixed value; used for idealized
  // fully blockaded references.
  std::optional<double> interaction_override_mhz;

  int max_atoms = 12;

  int n_atoms() const { return static_cast<int>(positions_um.size()); }

  double effective_rabi(int i) const {
    return per_atom_rabi_mhz.empty() ? params.rabi_mhz : per_atom_rabi_mhz[i];
  }

  double effective_detuning(int i) const {
    return per_atom_detuning_mhz.empty() ? params.detuning_mhz
                                         : per_atom_detuning_mhz[i];
  }

  void validate() const {
    params.validate();
    interaction.validate();
    const int n = n_atoms();
    if (n < 1) throw ConfigError("cluster needs at least one atom");
    if (n > max_atoms)
      throw CapacityError("cluster of " + std::to_string(n) +
                          " atoms exceeds the capacity of " +
                          std::to_string(max_atoms));
    if (!per_atom_rabi_mhz.empty() &&
        per_atom_rabi_mhz.size() != positions_um.size())
      throw ConfigError("per-atom rabi list does not match the atom count");
    if (!per_atom_detuning_mhz.empty() &&
        per_atom_detuning_mhz.size() != positions_um.size())
      throw ConfigError("per-atom detuning list does not match the atom count");
    for (double w : per_atom_rabi_mhz)
      if (w < 0.0) throw ConfigError("rabi frequency must be non-negative");
    for (size_t i = 0; i < positions_um.size(); ++i)
      for (size_t j = i + 1; j < positions_um.size(); ++j)
        if ((positions_um[i] - positions_um[j]).norm() <= 0.0)
          throw DegeneratePairError("two atoms share a position");
  }
};

// State of the cluster in the 2^N product basis (bit i of a basis index is
// atom i, set = |r>).  Pure amplitudes are kept whenever the evolution is
// unitary; any damping promotes the state to a density matrix.
class QuantumState {
 public:
  static QuantumState ground(int n_atoms) {
    QuantumState s;
    s.n_ = n_atoms;
    s.psi_ = Eigen::VectorXcd::Zero(std::int64_t{1} << n_atoms);
    s.psi_(0) = 1.0;
    s.pure_ = true;
    return s;
  }

  static QuantumState pure(Eigen::VectorXcd psi) {
    QuantumState s;
    s.n_ = std::bit_width(static_cast<std::uint64_t>(psi.size())) - 1;
    if ((std::int64_t{1} << s.n_) != psi.size())
      throw ConfigError("state dimension must be a power of two");
    s.psi_ = std::move(psi);
    s.pure_ = true;
    return s;
  }

  static QuantumState density(Eigen::MatrixXcd rho) {
    QuantumState s;
    s.n_ = std::bit_width(static_cast<std::uint64_t>(rho.rows())) - 1;
    if (rho.rows() != rho.cols() || (std::int64_t{1} << s.n_) != rho.rows())
      throw ConfigError("density matrix must be square with power-of-two size");
    s.rho_ = std::move(rho);
    s.pure_ = false;
    return s;
  }

  bool is_pure() const { return pure_; }
  int n_atoms() const { return n_; }
  std::int64_t dim() const { return std::int64_t{1} << n_; }

  const Eigen::VectorXcd& amplitudes() const {
    if (!pure_) throw Error("state is not pure");
    return psi_;
  }

  Eigen::MatrixXcd matrix() const {
    if (pure_) return psi_ * psi_.adjoint();
    return rho_;
  }

  double trace_deviation() const {
    if (pure_) return std::abs(psi_.squaredNorm() - 1.0);
    return std::abs(rho_.trace().real() - 1.0) + std::abs(rho_.trace().imag());
  }

  double hermiticity_error() const {
    if (pure_) return 0.0;
    return (rho_ - rho_.adjoint()).cwiseAbs().maxCoeff();
  }

  double min_eigenvalue() const {
    if (pure_) return 0.0;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> solver(
        rho_, Eigen::EigenvaluesOnly);
    return solver.eigenvalues().minCoeff();
  }

 private:
  int n_ = 0;
  bool pure_ = true;
  Eigen::VectorXcd psi_;
  Eigen::MatrixXcd rho_;
};

// Sampled observables of one evolution: per-site excitation probabilities
// and the distribution over total excitation number.
struct TimeSeries {
  std::vector<double> times_us;
  std::vector<std::string> columns;
  std::vector<std::vector<double>> values;  // [column][sample]
  std::map<std::string, std::string> metadata;
  int n_atoms = 0;

  bool has_column(const std::string& name) const {
    return std::find(columns.begin(), columns.end(), name) != columns.end();
  }

  const std::vector<double>& column(const std::string& name) const {
    for (size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return values[i];
    throw Error("time series has no column named '" + name + "'");
  }

  static std::string site_column(int i) {
    return "p_site_" + std::to_string(i);
  }
  static std::string count_column(int k) { return "p_k" + std::to_string(k); }
};

enum class CheckLevel {
  basic,  // trace and hermiticity at every sample
  full,   // additionally the positivity floor (eigenvalue solve per sample)
};

namespace detail {

using cvec = std::vector<std::complex<double>>;

constexpr double kTraceTol = 1e-9;
constexpr double kHermiticityTol = 1e-12;
constexpr double kEigenvalueFloor = -1e-10;

struct HamiltonianTerms {
  int n = 0;
  std::size_t dim = 1;
  std::vector<double> diag_mhz;   // interaction minus detuning, per basis state
  std::vector<double> half_rabi;  // Omega_i / 2 per atom
  double gamma_decay = 0.0;
  double gamma_dephase = 0.0;
  double max_frequency_mhz = 0.0;
};

inline HamiltonianTerms make_terms(const ClusterDynamicsSpec& spec) {
  spec.validate();
  const int n = spec.n_atoms();
  HamiltonianTerms t;
  t.n = n;
  t.dim = std::size_t{1} << n;

  std::vector<double> pair_v(static_cast<std::size_t>(n) * n, 0.0);
  double vmax = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double v =
          spec.interaction_override_mhz
              ? *spec.interaction_override_mhz
              : pair_interaction(spec.positions_um[i], spec.positions_um[j],
                                 spec.interaction);
      pair_v[static_cast<std::size_t>(i) * n + j] = v;
      vmax = std::max(vmax, std::abs(v));
    }

  t.half_rabi.resize(n);
  std::vector<double> delta(n);
  double wmax = 0.0, dmax = 0.0;
  for (int i = 0; i < n; ++i) {
    t.half_rabi[i] = 0.5 * spec.effective_rabi(i);
    delta[i] = spec.effective_detuning(i);
    wmax = std::max(wmax, spec.effective_rabi(i));
    dmax = std::max(dmax, std::abs(delta[i]));
  }
  t.max_frequency_mhz = std::max({wmax, vmax, dmax});

  t.diag_mhz.assign(t.dim, 0.0);
  for (std::size_t b = 0; b < t.dim; ++b) {
    double e = 0.0;
    for (int i = 0; i < n; ++i) {
      if (!(b >> i & 1)) continue;
      e -= delta[i];
      for (int j = i + 1; j < n; ++j)
        if (b >> j & 1) e += pair_v[static_cast<std::size_t>(i) * n + j];
    }
    t.diag_mhz[b] = e;
  }

  t.gamma_decay = spec.params.damping_per_us * spec.params.damping_decay_fraction;
  t.gamma_dephase =
      spec.params.damping_per_us * (1.0 - spec.params.damping_decay_fraction);
  return t;
}

// Smallest admissible sampling of the fastest coherent timescale.
inline double resolution_guard_us(const HamiltonianTerms& t) {
  if (t.max_frequency_mhz <= 0.0)
    return std::numeric_limits<double>::infinity();
  return 1.0 / (50.0 * t.max_frequency_mhz);
}

// Schroedinger propagation of pure amplitudes,
//   d psi[a] = -i 2 pi (diag[a] psi[a] + sum_i (Omega_i/2) psi[a ^ bit_i]).
class PureEvolver {
 public:
  explicit PureEvolver(const HamiltonianTerms& t) : t_(t) {
    k1_.resize(t.dim);
    k2_.resize(t.dim);
    k3_.resize(t.dim);
    k4_.resize(t.dim);
    tmp_.resize(t.dim);
  }

  void rhs(const cvec& psi, cvec& out) const {
    const std::complex<double> minus_i_2pi(0.0, -2.0 * M_PI);
    for (std::size_t a = 0; a < t_.dim; ++a) {
      std::complex<double> acc = t_.diag_mhz[a] * psi[a];
      for (int i = 0; i < t_.n; ++i)
        if (t_.half_rabi[i] != 0.0)
          acc += t_.half_rabi[i] * psi[a ^ (std::size_t{1} << i)];
      out[a] = minus_i_2pi * acc;
    }
  }

  void step(cvec& psi, double h) {
    rhs(psi, k1_);
    axpy(psi, k1_, 0.5 * h, tmp_);
    rhs(tmp_, k2_);
    axpy(psi, k2_, 0.5 * h, tmp_);
    rhs(tmp_, k3_);
    axpy(psi, k3_, h, tmp_);
    rhs(tmp_, k4_);
    const double w = h / 6.0;
    double norm2 = 0.0;
    for (std::size_t a = 0; a < t_.dim; ++a) {
      psi[a] += w * (k1_[a] + 2.0 * k2_[a] + 2.0 * k3_[a] + k4_[a]);
      norm2 += std::norm(psi[a]);
    }
    // The exact flow is unitary; project the step back onto the constraint
    // so norm drift cannot accumulate over long evolutions.
    if (!(norm2 > 0.25))
      throw Error("pure-state integration diverged");
    const double scale = 1.0 / std::sqrt(norm2);
    for (std::size_t a = 0; a < t_.dim; ++a) psi[a] *= scale;
  }

 private:
  static void axpy(const cvec& base, const cvec& k, double h, cvec& out) {
    for (std::size_t a = 0; a < base.size(); ++a) out[a] = base[a] + h * k[a];
  }

  const HamiltonianTerms& t_;
  cvec k1_, k2_, k3_, k4_, tmp_;
};

// Lindblad propagation of the density matrix with per-atom decay
// (sqrt(gd) |g><r|) and pure dephasing (coherence decay rate gphi).
// Row-major storage; the commutator is assembled from row flips only,
// mirroring through the Hermitian transpose, which also keeps rho Hermitian
// to machine precision.
class DensityEvolver {
 public:
  explicit DensityEvolver(const HamiltonianTerms& t) : t_(t), dim_(t.dim) {
    const std::size_t size = dim_ * dim_;
    w_.resize(size);
    for (std::size_t a = 0; a < dim_; ++a)
      for (std::size_t b = 0; b < dim_; ++b) {
        double loss = 0.0;
        for (int i = 0; i < t_.n; ++i) {
          const int ai = a >> i & 1, bi = b >> i & 1;
          loss += 0.5 * t_.gamma_decay * (ai + bi) +
                  t_.gamma_dephase * (ai ^ bi);
        }
        w_[a * dim_ + b] = std::complex<double>(
            -loss, -2.0 * M_PI * (t_.diag_mhz[a] - t_.diag_mhz[b]));
      }
    k1_.resize(size);
    k2_.resize(size);
    k3_.resize(size);
    k4_.resize(size);
    tmp_.resize(size);
    s_.resize(size);
  }

  void rhs(const cvec& rho, cvec& out) {
    const std::size_t size = dim_ * dim_;
    for (std::size_t idx = 0; idx < size; ++idx) out[idx] = w_[idx] * rho[idx];

    // S = sum_i (Omega_i/2) * rho with row a replaced by row (a ^ bit_i).
    bool any = false;
    for (int i = 0; i < t_.n; ++i) any |= t_.half_rabi[i] != 0.0;
    if (any) {
      std::fill(s_.begin(), s_.end(), std::complex<double>(0.0));
      for (int i = 0; i < t_.n; ++i) {
        const double hr = t_.half_rabi[i];
        if (hr == 0.0) continue;
        const std::size_t bit = std::size_t{1} << i;
        for (std::size_t a = 0; a < dim_; ++a) {
          const std::complex<double>* src = &rho[(a ^ bit) * dim_];
          std::complex<double>* dst = &s_[a * dim_];
          for (std::size_t b = 0; b < dim_; ++b) dst[b] += hr * src[b];
        }
      }
      // -i 2 pi (S - S^dagger), exactly Hermitian by construction.
      const std::complex<double> minus_i_2pi(0.0, -2.0 * M_PI);
      for (std::size_t a = 0; a < dim_; ++a)
        for (std::size_t b = 0; b < dim_; ++b)
          out[a * dim_ + b] +=
              minus_i_2pi * (s_[a * dim_ + b] - std::conj(s_[b * dim_ + a]));
    }

    if (t_.gamma_decay > 0.0) {
      for (int i = 0; i < t_.n; ++i) {
        const std::size_t bit = std::size_t{1} << i;
        for (std::size_t a = 0; a < dim_; ++a) {
          if (a & bit) continue;
          const std::complex<double>* src = &rho[(a | bit) * dim_];
          std::complex<double>* dst = &out[a * dim_];
          for (std::size_t b = 0; b < dim_; ++b)
            if (!(b & bit)) dst[b] += t_.gamma_decay * src[b | bit];
        }
      }
    }
  }

  void step(cvec& rho, double h) {
    rhs(rho, k1_);
    axpy(rho, k1_, 0.5 * h, tmp_);
    rhs(tmp_, k2_);
    axpy(rho, k2_, 0.5 * h, tmp_);
    rhs(tmp_, k3_);
    axpy(rho, k3_, h, tmp_);
    rhs(tmp_, k4_);
    const double w = h / 6.0;
    for (std::size_t idx = 0; idx < rho.size(); ++idx)
      rho[idx] += w * (k1_[idx] + 2.0 * k2_[idx] + 2.0 * k3_[idx] + k4_[idx]);
    // The exact flow is trace preserving; rescale by the (exactly real)
    // diagonal so truncation drift cannot accumulate.  Real scaling keeps
    // the matrix Hermitian to the last bit.
    double trace = 0.0;
    for (std::size_t a = 0; a < dim_; ++a) trace += rho[a * dim_ + a].real();
    if (!(trace > 0.25))
      throw Error("density-matrix integration diverged");
    const double scale = 1.0 / trace;
    for (std::size_t idx = 0; idx < rho.size(); ++idx) rho[idx] *= scale;
  }

 private:
  static void axpy(const cvec& base, const cvec& k, double h, cvec& out) {
    for (std::size_t idx = 0; idx < base.size(); ++idx)
      out[idx] = base[idx] + h * k[idx];
  }

  const HamiltonianTerms& t_;
  std::size_t dim_;
  cvec w_;
  cvec k1_, k2_, k3_, k4_, tmp_, s_;
};

struct SampleChecks {
  double max_trace_dev = 0.0;
  double max_herm_err = 0.0;
  double min_eig = 0.0;
};

inline void record_sample(const cvec& state, bool pure, std::size_t dim, int n,
                          TimeSeries& series, CheckLevel check,
                          SampleChecks& checks, double t) {
  series.times_us.push_back(t);

  std::vector<double> weights(dim);
  double trace = 0.0;
  if (pure) {
    for (std::size_t b = 0; b < dim; ++b) {
      weights[b] = std::norm(state[b]);
      trace += weights[b];
    }
  } else {
    for (std::size_t b = 0; b < dim; ++b) {
      weights[b] = state[b * dim + b].real();
      trace += weights[b];
    }
  }

  const double trace_dev = std::abs(trace - 1.0);
  checks.max_trace_dev = std::max(checks.max_trace_dev, trace_dev);
  if (trace_dev > kTraceTol)
    throw Error("evolution lost normalization: |trace - 1| = " +
                std::to_string(trace_dev));

  if (!pure) {
    double herm = 0.0;
    for (std::size_t a = 0; a < dim; ++a)
      for (std::size_t b = a + 1; b < dim; ++b)
        herm = std::max(herm, std::abs(state[a * dim + b] -
                                       std::conj(state[b * dim + a])));
    checks.max_herm_err = std::max(checks.max_herm_err, herm);
    if (herm > kHermiticityTol)
      throw Error("evolution lost hermiticity: max deviation " +
                  std::to_string(herm));
    if (check == CheckLevel::full) {
      Eigen::MatrixXcd rho(dim, dim);
      for (std::size_t a = 0; a < dim; ++a)
        for (std::size_t b = 0; b < dim; ++b) rho(a, b) = state[a * dim + b];
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> solver(
          rho, Eigen::EigenvaluesOnly);
      const double min_eig = solver.eigenvalues().minCoeff();
      checks.min_eig = std::min(checks.min_eig, min_eig);
      if (min_eig < kEigenvalueFloor)
        throw Error("evolution lost positivity: min eigenvalue " +
                    std::to_string(min_eig));
    }
  }

  auto clamp01 = [](double v) { return std::clamp(v, 0.0, 1.0); };
  std::size_t col = 0;
  for (int i = 0; i < n; ++i) {
    double p = 0.0;
    for (std::size_t b = 0; b < dim; ++b)
      if (b >> i & 1) p += weights[b];
    series.values[col++].push_back(clamp01(p));
  }
  for (int k = 0; k <= n; ++k) {
    double p = 0.0;
    for (std::size_t b = 0; b < dim; ++b)
      if (std::popcount(b) == k) p += weights[b];
    series.values[col++].push_back(clamp01(p));
  }
}

inline TimeSeries propagate(const ClusterDynamicsSpec& spec,
                            const QuantumState& initial,
                            const std::vector<double>& sample_times,
                            const std::vector<int>& substeps,
                            CheckLevel check) {
  const HamiltonianTerms terms = make_terms(spec);
  const int n = terms.n;
  const std::size_t dim = terms.dim;
  if (initial.dim() != static_cast<std::int64_t>(dim))
    throw ConfigError("initial state dimension does not match the cluster");

  const bool pure = initial.is_pure() && spec.params.damping_per_us == 0.0;

  TimeSeries series;
  series.n_atoms = n;
  for (int i = 0; i < n; ++i) series.columns.push_back(TimeSeries::site_column(i));
  for (int k = 0; k <= n; ++k)
    series.columns.push_back(TimeSeries::count_column(k));
  series.values.assign(series.columns.size(), {});

  SampleChecks checks;
  cvec state;
  if (pure) {
    const auto& psi = initial.amplitudes();
    state.assign(psi.data(), psi.data() + psi.size());
    PureEvolver evolver(terms);
    record_sample(state, true, dim, n, series, check, checks, sample_times[0]);
    for (std::size_t s = 1; s < sample_times.size(); ++s) {
      const double h =
          (sample_times[s] - sample_times[s - 1]) / substeps[s - 1];
      for (int k = 0; k < substeps[s - 1]; ++k) evolver.step(state, h);
      record_sample(state, true, dim, n, series, check, checks,
                    sample_times[s]);
    }
  } else {
    Eigen::MatrixXcd rho = initial.matrix();
    state.resize(dim * dim);
    for (std::size_t a = 0; a < dim; ++a)
      for (std::size_t b = 0; b < dim; ++b) state[a * dim + b] = rho(a, b);
    DensityEvolver evolver(terms);
    record_sample(state, false, dim, n, series, check, checks, sample_times[0]);
    for (std::size_t s = 1; s < sample_times.size(); ++s) {
      const double h =
          (sample_times[s] - sample_times[s - 1]) / substeps[s - 1];
      for (int k = 0; k < substeps[s - 1]; ++k) evolver.step(state, h);
      record_sample(state, false, dim, n, series, check, checks,
                    sample_times[s]);
    }
  }

  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", checks.max_trace_dev);
  series.metadata["max_trace_deviation"] = buf;
  if (!pure) {
    std::snprintf(buf, sizeof buf, "%.3e", checks.max_herm_err);
    series.metadata["max_hermiticity_error"] = buf;
    if (check == CheckLevel::full) {
      std::snprintf(buf, sizeof buf, "%.3e", checks.min_eig);
      series.metadata["min_eigenvalue"] = buf;
    }
  }
  return series;
}

}  // namespace detail

// Dense Hamiltonian in the product basis, in MHz.  Intended for inspection
// and small-cluster diagonalization; the propagators below apply the same
// coefficients without materializing the matrix.
inline Eigen::MatrixXcd build_hamiltonian(const ClusterDynamicsSpec& spec) {
  const detail::HamiltonianTerms t = detail::make_terms(spec);
  Eigen::MatrixXcd h = Eigen::MatrixXcd::Zero(t.dim, t.dim);
  for (std::size_t a = 0; a < t.dim; ++a) {
    h(a, a) = t.diag_mhz[a];
    for (int i = 0; i < t.n; ++i)
      h(a, a ^ (std::size_t{1} << i)) += t.half_rabi[i];
  }
  return h;
}

// Fixed-step evolution over [0, t_max].  dt must respect the resolution
// guard dt <= 1 / (50 * max(Omega, |V|, |delta|)); it is rounded down so the
// sample grid divides t_max exactly.  record_stride > 1 thins the output.
inline TimeSeries evolve(const ClusterDynamicsSpec& spec,
                         const QuantumState& initial, double t_max_us,
                         double dt_us, int record_stride = 1,
                         CheckLevel check = CheckLevel::basic) {
  if (t_max_us <= 0.0) throw ConfigError("evolution span must be positive");
  if (dt_us <= 0.0) throw ConfigError("time step must be positive");
  if (record_stride < 1) throw ConfigError("record stride must be positive");

  const detail::HamiltonianTerms terms = detail::make_terms(spec);
  const double guard = detail::resolution_guard_us(terms);
  if (dt_us > guard + 1e-15)
    throw StepSizeError(
        "time step " + std::to_string(dt_us) +
        " us exceeds the resolution guard of " + std::to_string(guard) +
        " us for this cluster");

  std::size_t steps = static_cast<std::size_t>(std::ceil(t_max_us / dt_us - 1e-9));
  steps = std::max<std::size_t>(steps, 1);
  const std::size_t stride = static_cast<std::size_t>(record_stride);
  steps = ((steps + stride - 1) / stride) * stride;

  const std::size_t samples = steps / stride;
  const double sample_dt = t_max_us / static_cast<double>(samples);
  std::vector<double> times(samples + 1);
  for (std::size_t s = 0; s <= samples; ++s)
    times[s] = sample_dt * static_cast<double>(s);
  std::vector<int> substeps(samples, static_cast<int>(stride));
  return detail::propagate(spec, initial, times, substeps, check);
}

// Evolution recorded at caller-chosen times (ascending, starting at 0); the
// integrator subdivides each interval to honor the resolution guard.
inline TimeSeries evolve_sampled(const ClusterDynamicsSpec& spec,
                                 const QuantumState& initial,
                                 const std::vector<double>& times_us,
                                 CheckLevel check = CheckLevel::basic) {
  if (times_us.size() < 2 || times_us.front() != 0.0)
    throw ConfigError("sample times must start at 0 and contain the span end");
  for (size_t i = 1; i < times_us.size(); ++i)
    if (times_us[i] <= times_us[i - 1])
      throw ConfigError("sample times must be strictly increasing");

  const detail::HamiltonianTerms terms = detail::make_terms(spec);
  // Pace the substeps by the damping as well; a purely dissipative cluster
  // has no coherent frequency but still needs resolved decay.
  const double pace_mhz =
      std::max(terms.max_frequency_mhz,
               (terms.gamma_decay + terms.gamma_dephase) / (2.0 * M_PI));
  const double guard =
      pace_mhz > 0.0 ? 1.0 / (50.0 * pace_mhz)
                     : std::numeric_limits<double>::infinity();
  std::vector<int> substeps(times_us.size() - 1);
  for (size_t i = 0; i + 1 < times_us.size(); ++i) {
    const double span = times_us[i + 1] - times_us[i];
    substeps[i] = std::isfinite(guard)
                      ? std::max(1, static_cast<int>(std::ceil(span / guard)))
                      : 1;
  }
  return detail::propagate(spec, initial, times_us, substeps, check);
}

// Excitation-number statistics of a recorded evolution, including the total
// weight in doubly and higher excited states (blockade leakage).
struct ExcitationStatistics {
  std::vector<double> times_us;
  std::vector<std::vector<double>> p_k;   // [k][sample]
  std::vector<double> multi_excitation;   // sum over k >= 2
};

inline ExcitationStatistics excitation_statistics(const TimeSeries& series) {
  ExcitationStatistics stats;
  stats.times_us = series.times_us;
  for (int k = 0; k <= series.n_atoms; ++k)
    stats.p_k.push_back(series.column(TimeSeries::count_column(k)));
  stats.multi_excitation.assign(series.times_us.size(), 0.0);
  for (int k = 2; k <= series.n_atoms; ++k)
    for (size_t s = 0; s < stats.multi_excitation.size(); ++s)
      stats.multi_excitation[s] += stats.p_k[k][s];
  return stats;
}

}  // namespace tweezersim
