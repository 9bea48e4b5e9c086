#pragma once

// Stochastic loading of the trap array and deterministic rearrangement
// planning: vacant target sites are filled center-out from the closest
// reservoir atoms, moving along grid lines with at most one turn.  When a
// path crosses an occupied trap, that atom is moved into the target instead
// and the original reservoir atom takes its place, recursively, so one
// reservoir atom is consumed per vacancy regardless of obstacles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <vector>

#include "tweezersim/errors.hpp"
#include "tweezersim/lattice.hpp"
#include "tweezersim/rng.hpp"

namespace tweezersim {

struct LoadModel {
  double fill_probability = 0.55;

  void validate() const {
    if (fill_probability < 0.0 || fill_probability > 1.0)
      throw ConfigError("fill probability must lie in [0, 1]");
  }
};

// One tweezer transport: pick up at source, travel along path, drop at
// destination.  The path lists every grid site from source to destination
// inclusive and has at most one turn.
struct Move {
  SiteIndex source;
  SiteIndex destination;
  std::vector<SiteIndex> path;
};

struct RearrangementPlan {
  std::vector<Move> moves;
  std::vector<SiteIndex> discards;  // surplus atoms dropped from the array
  double estimated_duration_ms = 0.0;
  int shortfall = 0;  // vacancies left unfilled for lack of reservoir atoms
};

// Timing and loss parameters of one rearrangement cycle (lower the trap
// depth, run the moves, restore the depth, image).
struct ExecutionModel {
  double ramp_duration_us = 200.0;     // tweezer depth ramp, one direction
  double transport_duration_ms = 1.0;  // one sine-shaped transport
  double cycle_overhead_ms = 20.0;     // detection plus array depth ramps
  double per_move_loss = 0.0;          // chance of losing the atom in flight
  double per_cycle_loss = 0.05;        // per-atom loss per cycle (depth
                                       // truncation plus imaging)
  double depth_lowering_factor = 5.0;  // array depth reduction while moving
  int max_cycles = 15;

  void validate() const {
    if (ramp_duration_us < 0.0 || transport_duration_ms < 0.0 ||
        cycle_overhead_ms < 0.0)
      throw ConfigError("execution durations must be non-negative");
    if (per_move_loss < 0.0 || per_move_loss > 1.0 || per_cycle_loss < 0.0 ||
        per_cycle_loss > 1.0)
      throw ConfigError("loss probabilities must lie in [0, 1]");
    if (depth_lowering_factor < 1.0)
      throw ConfigError("depth lowering factor must be at least 1");
    if (max_cycles < 1) throw ConfigError("max_cycles must be at least 1");
  }

  double move_cost_ms() const {
    return transport_duration_ms + 2.0 * ramp_duration_us / 1000.0;
  }

  double plan_duration_ms(size_t n_moves) const {
    return cycle_overhead_ms + static_cast<double>(n_moves) * move_cost_ms();
  }
};

inline OccupancyGrid sample_loading(const TrapArray& array,
                                    const LoadModel& model,
                                    std::uint64_t seed) {
  array.validate();
  model.validate();
  OccupancyGrid grid(array.rows, array.cols);
  rng::Stream stream(seed);
  for (int r = 0; r < array.rows; ++r)
    for (int c = 0; c < array.cols; ++c)
      grid.set({r, c}, stream.bernoulli(model.fill_probability));
  return grid;
}

inline bool pattern_satisfied(const OccupancyGrid& grid,
                              const TargetPattern& pattern) {
  SiteClassification cls = classify(grid, pattern);
  return cls.vacant_targets == 0 && cls.frame_violations == 0;
}

namespace detail {

inline double site_distance2(SiteIndex a, SiteIndex b) {
  const double dr = a.row - b.row;
  const double dc = a.col - b.col;
  return dr * dr + dc * dc;
}

// Straight or single-turn path from a to b.  col_first walks the row
// coordinate last (horizontal leg first); for aligned pairs both variants
// coincide.
inline std::vector<SiteIndex> l_path(SiteIndex a, SiteIndex b, bool col_first) {
  std::vector<SiteIndex> path;
  path.push_back(a);
  SiteIndex cur = a;
  auto walk_cols = [&] {
    while (cur.col != b.col) {
      cur.col += (b.col > cur.col) ? 1 : -1;
      path.push_back(cur);
    }
  };
  auto walk_rows = [&] {
    while (cur.row != b.row) {
      cur.row += (b.row > cur.row) ? 1 : -1;
      path.push_back(cur);
    }
  };
  if (col_first) {
    walk_cols();
    walk_rows();
  } else {
    walk_rows();
    walk_cols();
  }
  return path;
}

inline std::vector<SiteIndex> path_obstacles(const OccupancyGrid& occ,
                                             const std::vector<SiteIndex>& path) {
  std::vector<SiteIndex> obstacles;
  for (size_t i = 1; i + 1 < path.size(); ++i)
    if (occ.occupied(path[i])) obstacles.push_back(path[i]);
  return obstacles;
}

// Picks the candidate path with the fewest occupied intermediate sites,
// preferring the horizontal-first variant on ties, and emits the move chain
// that shifts every obstacle one hop toward the destination.  Obstacles are
// resolved nearest-destination first so each transport crosses only empty
// traps.  Updates occ in place.
inline void chain_moves(OccupancyGrid& occ, SiteIndex source,
                        SiteIndex destination, std::vector<Move>& out) {
  std::vector<SiteIndex> path = l_path(source, destination, true);
  std::vector<SiteIndex> obstacles = path_obstacles(occ, path);
  if (source.row != destination.row && source.col != destination.col) {
    std::vector<SiteIndex> alt = l_path(source, destination, false);
    std::vector<SiteIndex> alt_obstacles = path_obstacles(occ, alt);
    if (alt_obstacles.size() < obstacles.size()) {
      path = std::move(alt);
      obstacles = std::move(alt_obstacles);
    }
  }

  std::vector<SiteIndex> nodes;
  nodes.push_back(source);
  nodes.insert(nodes.end(), obstacles.begin(), obstacles.end());
  nodes.push_back(destination);

  // Split the full path at the chain nodes.
  std::vector<size_t> node_pos(nodes.size());
  size_t cursor = 0;
  for (size_t k = 0; k < nodes.size(); ++k) {
    while (path[cursor] != nodes[k]) ++cursor;
    node_pos[k] = cursor;
  }

  for (size_t k = nodes.size() - 1; k-- > 0;) {
    Move m;
    m.source = nodes[k];
    m.destination = nodes[k + 1];
    m.path.assign(path.begin() + node_pos[k], path.begin() + node_pos[k + 1] + 1);
    occ.set(m.source, false);
    occ.set(m.destination, true);
    out.push_back(std::move(m));
  }
}

struct NearestQuery {
  SiteIndex from;
  double best_d2 = 0.0;
  std::optional<SiteIndex> best;

  void offer(SiteIndex s) {
    const double d2 = site_distance2(from, s);
    if (!best || d2 < best_d2) {  // row-major scan order settles ties
      best = s;
      best_d2 = d2;
    }
  }
};

}  // namespace detail

// Deterministic greedy planner.  Vacant target sites are processed in order
// of distance from the target centroid (closest first, row-major on ties);
// each is paired with the closest occupied non-target trap.  After all
// reachable vacancies are filled, atoms remaining in the exclusion zone are
// moved to the nearest free trap outside the pattern, or discarded when no
// such trap exists.
inline RearrangementPlan plan_rearrangement(const OccupancyGrid& grid,
                                            const TargetPattern& pattern,
                                            const ExecutionModel& model = {}) {
  if (grid.rows() != pattern.rows() || grid.cols() != pattern.cols())
    throw BoundsError("occupancy grid and pattern dimensions differ");
  model.validate();

  RearrangementPlan plan;
  OccupancyGrid occ = grid;

  const std::vector<SiteIndex> targets = pattern.target_sites();
  if (!targets.empty()) {
    double crow = 0.0, ccol = 0.0;
    for (SiteIndex t : targets) {
      crow += t.row;
      ccol += t.col;
    }
    crow /= targets.size();
    ccol /= targets.size();

    std::vector<SiteIndex> vacancies;
    for (SiteIndex t : targets)
      if (!occ.occupied(t)) vacancies.push_back(t);
    std::stable_sort(vacancies.begin(), vacancies.end(),
                     [&](SiteIndex a, SiteIndex b) {
                       const double da = (a.row - crow) * (a.row - crow) +
                                         (a.col - ccol) * (a.col - ccol);
                       const double db = (b.row - crow) * (b.row - crow) +
                                         (b.col - ccol) * (b.col - ccol);
                       if (da != db) return da < db;
                       return a < b;
                     });

    for (SiteIndex v : vacancies) {
      detail::NearestQuery query{v, 0.0, std::nullopt};
      for (int r = 0; r < occ.rows(); ++r)
        for (int c = 0; c < occ.cols(); ++c) {
          SiteIndex s{r, c};
          if (occ.occupied(s) && !pattern.is_target(s)) query.offer(s);
        }
      if (!query.best) {
        ++plan.shortfall;
        continue;
      }
      detail::chain_moves(occ, *query.best, v, plan.moves);
    }
  }

  // Evacuate the exclusion zone.  Each chain strictly reduces the number of
  // occupied exclusion sites, so the scan terminates.
  for (;;) {
    std::optional<SiteIndex> frame_atom;
    for (int r = 0; r < occ.rows() && !frame_atom; ++r)
      for (int c = 0; c < occ.cols(); ++c) {
        SiteIndex s{r, c};
        if (pattern.is_exclusion(s) && occ.occupied(s)) {
          frame_atom = s;
          break;
        }
      }
    if (!frame_atom) break;

    detail::NearestQuery query{*frame_atom, 0.0, std::nullopt};
    for (int r = 0; r < occ.rows(); ++r)
      for (int c = 0; c < occ.cols(); ++c) {
        SiteIndex s{r, c};
        if (!occ.occupied(s) && !pattern.is_target(s) && !pattern.is_exclusion(s))
          query.offer(s);
      }
    if (!query.best) {
      plan.discards.push_back(*frame_atom);
      occ.set(*frame_atom, false);
      continue;
    }
    detail::chain_moves(occ, *frame_atom, *query.best, plan.moves);
  }

  plan.estimated_duration_ms = model.plan_duration_ms(plan.moves.size());
  return plan;
}

struct ExecStats {
  int moves_attempted = 0;
  int moves_skipped = 0;  // source atom already lost upstream
  int atoms_lost = 0;
  int atoms_discarded = 0;
  double duration_ms = 0.0;
};

struct ExecutionResult {
  OccupancyGrid grid;
  ExecStats stats;
};

// Runs a plan against a grid.  Each transported atom is lost independently
// with per_move_loss; a move whose source was emptied by an upstream loss is
// skipped (the tweezer grabs nothing).  A move inconsistent with the grid
// for any other reason aborts with ExecutionIntegrityError.
inline ExecutionResult execute_plan(const OccupancyGrid& grid,
                                    const RearrangementPlan& plan,
                                    const ExecutionModel& model,
                                    std::uint64_t seed) {
  model.validate();
  ExecutionResult out{grid, {}};
  OccupancyGrid& occ = out.grid;
  rng::Stream stream(seed);

  // Sites whose atom vanished (in flight or because it never arrived);
  // moves out of these are explainable and skipped rather than fatal.
  std::set<SiteIndex> shadow;

  for (const Move& m : plan.moves) {
    ++out.stats.moves_attempted;
    if (!occ.occupied(m.source)) {
      if (shadow.count(m.source)) {
        ++out.stats.moves_skipped;
        shadow.insert(m.destination);
        continue;
      }
      throw ExecutionIntegrityError("move source is empty and no loss explains it");
    }
    if (occ.occupied(m.destination))
      throw ExecutionIntegrityError("move destination is already occupied");
    for (size_t i = 1; i + 1 < m.path.size(); ++i)
      if (occ.occupied(m.path[i]))
        throw ExecutionIntegrityError("transport path crosses an occupied trap");

    occ.set(m.source, false);
    shadow.erase(m.source);
    if (stream.bernoulli(model.per_move_loss)) {
      ++out.stats.atoms_lost;
      shadow.insert(m.destination);
    } else {
      occ.set(m.destination, true);
      shadow.erase(m.destination);
    }
  }

  for (SiteIndex d : plan.discards) {
    if (occ.occupied(d)) {
      occ.set(d, false);
      ++out.stats.atoms_discarded;
    }
  }

  out.stats.duration_ms = model.plan_duration_ms(plan.moves.size());
  return out;
}

struct AssembleResult {
  OccupancyGrid initial_grid;
  OccupancyGrid final_grid;
  bool success = false;
  int cycles_used = 0;
  int total_moves = 0;
  int atoms_lost = 0;
  int atoms_discarded = 0;
  int last_shortfall = 0;
  double total_duration_ms = 0.0;
};

// Full assembly: load once, then iterate plan / execute / re-detect until
// the pattern holds or max_cycles is exhausted.  Remaining reservoir atoms
// serve as the refill source between cycles; nothing is reloaded from
// outside.  An unfillable pattern reports success = false with the last
// cycle's shortfall rather than raising.
inline AssembleResult assemble(const TrapArray& array,
                               const TargetPattern& pattern,
                               const LoadModel& load,
                               const ExecutionModel& exec,
                               std::uint64_t seed) {
  if (array.rows != pattern.rows() || array.cols != pattern.cols())
    throw BoundsError("trap array and pattern dimensions differ");
  exec.validate();

  AssembleResult result;
  result.initial_grid = sample_loading(array, load, rng::derive(seed, 0));
  OccupancyGrid grid = result.initial_grid;

  for (int cycle = 0; cycle < exec.max_cycles; ++cycle) {
    if (pattern_satisfied(grid, pattern)) break;

    RearrangementPlan plan = plan_rearrangement(grid, pattern, exec);
    result.last_shortfall = plan.shortfall;
    if (plan.moves.empty() && plan.discards.empty()) break;  // nothing to do

    ExecutionResult exec_result =
        execute_plan(grid, plan, exec, rng::derive(seed, 1000 + cycle));
    grid = std::move(exec_result.grid);
    result.total_moves += exec_result.stats.moves_attempted;
    result.atoms_lost += exec_result.stats.atoms_lost;
    result.atoms_discarded += exec_result.stats.atoms_discarded;
    result.total_duration_ms += exec_result.stats.duration_ms;
    ++result.cycles_used;

    // Background loss over the cycle: depth truncation plus imaging.
    if (exec.per_cycle_loss > 0.0) {
      rng::Stream loss_stream(rng::derive(seed, 2000 + cycle));
      for (int r = 0; r < grid.rows(); ++r)
        for (int c = 0; c < grid.cols(); ++c) {
          SiteIndex s{r, c};
          if (grid.occupied(s) && loss_stream.bernoulli(exec.per_cycle_loss)) {
            grid.set(s, false);
            ++result.atoms_lost;
          }
        }
    }
  }

  result.success = pattern_satisfied(grid, pattern);
  result.final_grid = std::move(grid);
  return result;
}

}  // namespace tweezersim
