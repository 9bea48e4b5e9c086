#pragma once

// Square tweezer lattice: site addressing, metric geometry relative to the
// quantization axis, occupancy grids, and target patterns for assembly.
//
// Unit conventions used across the library: lengths in um, energies as
// frequencies E/h in MHz, times in us, temperatures in uK.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <string>
#include <vector>

#include "tweezersim/errors.hpp"
#include "tweezersim/geometry.hpp"

namespace tweezersim {

// (row, col) address into the lattice; row-major order breaks all ties in
// the library, so SiteIndex orders by row first.
struct SiteIndex {
  int row = 0;
  int col = 0;

  auto operator<=>(const SiteIndex&) const = default;
};

// Physical description of a square array of optical traps.
struct TrapArray {
  int rows = 19;
  int cols = 19;
  double pitch_um = 7.0;
  double trap_waist_um = 1.45;
  double trap_depth_uK = 1000.0;  // U0 / kB
  double trap_wavelength_nm = 797.3;

  void validate() const {
    if (rows < 1 || cols < 1)
      throw ConfigError("trap array needs at least one row and one column");
    if (pitch_um <= 0.0) throw ConfigError("trap pitch must be positive");
    if (trap_waist_um <= 0.0) throw ConfigError("trap waist must be positive");
    if (trap_depth_uK <= 0.0) throw ConfigError("trap depth must be positive");
    if (trap_wavelength_nm <= 0.0)
      throw ConfigError("trap wavelength must be positive");
  }

  bool contains(SiteIndex s) const {
    return s.row >= 0 && s.row < rows && s.col >= 0 && s.col < cols;
  }

  int site_count() const { return rows * cols; }
  int flat_index(SiteIndex s) const { return s.row * cols + s.col; }
};

// Position of a site in the array plane, in um.  Origin is the (0,0) trap,
// x along columns, y along rows.
inline Vec2 site_position(const TrapArray& array, SiteIndex s) {
  if (!array.contains(s))
    throw BoundsError("site (" + std::to_string(s.row) + "," +
                      std::to_string(s.col) + ") outside " +
                      std::to_string(array.rows) + "x" +
                      std::to_string(array.cols) + " array");
  return {s.col * array.pitch_um, s.row * array.pitch_um};
}

struct PairGeometry {
  double distance_um = 0.0;
  double angle_rad = 0.0;  // against the quantization axis, folded to [0, pi/2]
};

// Separation and orientation of a trap pair.  The angle is measured between
// the interatomic axis and the given quantization axis; because pair
// interactions are symmetric under axis reflection it is folded to the first
// quadrant.
inline PairGeometry pairwise_distance_and_angle(const TrapArray& array,
                                                SiteIndex a, SiteIndex b,
                                                Vec2 quantization_axis = {1.0,
                                                                          0.0}) {
  if (a == b)
    throw DegeneratePairError("pair geometry requested for a site with itself");
  const Vec2 pa = site_position(array, a);
  const Vec2 pb = site_position(array, b);
  const Vec2 d = pb - pa;
  const double r = d.norm();
  const double axis_norm = quantization_axis.norm();
  if (axis_norm <= 0.0)
    throw ConfigError("quantization axis must be a nonzero vector");
  double c = std::abs(d.dot(quantization_axis)) / (r * axis_norm);
  c = std::clamp(c, 0.0, 1.0);
  return {r, std::acos(c)};
}

// Boolean occupancy of every trap in the array.
class OccupancyGrid {
 public:
  OccupancyGrid() = default;
  OccupancyGrid(int rows, int cols)
      : rows_(rows), cols_(cols), occupied_(static_cast<size_t>(rows) * cols, 0) {
    if (rows < 1 || cols < 1)
      throw ConfigError("occupancy grid needs positive dimensions");
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }

  bool occupied(SiteIndex s) const { return occupied_[checked_index(s)] != 0; }
  void set(SiteIndex s, bool value) { occupied_[checked_index(s)] = value ? 1 : 0; }

  int atom_count() const {
    int n = 0;
    for (auto v : occupied_) n += v;
    return n;
  }

  std::vector<SiteIndex> occupied_sites() const {
    std::vector<SiteIndex> out;
    for (int r = 0; r < rows_; ++r)
      for (int c = 0; c < cols_; ++c)
        if (occupied_[static_cast<size_t>(r) * cols_ + c]) out.push_back({r, c});
    return out;
  }

  bool operator==(const OccupancyGrid&) const = default;

 private:
  size_t checked_index(SiteIndex s) const {
    if (s.row < 0 || s.row >= rows_ || s.col < 0 || s.col >= cols_)
      throw BoundsError("site (" + std::to_string(s.row) + "," +
                        std::to_string(s.col) + ") outside occupancy grid");
    return static_cast<size_t>(s.row) * cols_ + s.col;
  }

  int rows_ = 0;
  int cols_ = 0;
  std::vector<std::uint8_t> occupied_;
};

// Assembly goal: sites that must hold an atom and sites that must end up
// empty (an exclusion zone around the structure).  The two sets are disjoint;
// everything else is don't-care.
class TargetPattern {
 public:
  TargetPattern() = default;
  TargetPattern(int rows, int cols)
      : rows_(rows), cols_(cols),
        target_(static_cast<size_t>(rows) * cols, 0),
        exclusion_(static_cast<size_t>(rows) * cols, 0) {
    if (rows < 1 || cols < 1)
      throw ConfigError("target pattern needs positive dimensions");
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }

  bool is_target(SiteIndex s) const { return target_[checked_index(s)] != 0; }
  bool is_exclusion(SiteIndex s) const { return exclusion_[checked_index(s)] != 0; }

  void mark_target(SiteIndex s) {
    size_t i = checked_index(s);
    if (exclusion_[i])
      throw ConfigError("site marked both target and exclusion");
    target_[i] = 1;
  }

  void mark_exclusion(SiteIndex s) {
    size_t i = checked_index(s);
    if (target_[i])
      throw ConfigError("site marked both target and exclusion");
    exclusion_[i] = 1;
  }

  std::vector<SiteIndex> target_sites() const { return collect(target_); }
  std::vector<SiteIndex> exclusion_sites() const { return collect(exclusion_); }

  int target_count() const {
    int n = 0;
    for (auto v : target_) n += v;
    return n;
  }

  bool operator==(const TargetPattern&) const = default;

 private:
  size_t checked_index(SiteIndex s) const {
    if (s.row < 0 || s.row >= rows_ || s.col < 0 || s.col >= cols_)
      throw BoundsError("site (" + std::to_string(s.row) + "," +
                        std::to_string(s.col) + ") outside pattern");
    return static_cast<size_t>(s.row) * cols_ + s.col;
  }

  std::vector<SiteIndex> collect(const std::vector<std::uint8_t>& mask) const {
    std::vector<SiteIndex> out;
    for (int r = 0; r < rows_; ++r)
      for (int c = 0; c < cols_; ++c)
        if (mask[static_cast<size_t>(r) * cols_ + c]) out.push_back({r, c});
    return out;
  }

  int rows_ = 0;
  int cols_ = 0;
  std::vector<std::uint8_t> target_;
  std::vector<std::uint8_t> exclusion_;
};

namespace detail {

// Shared row scanner for the ASCII grid formats.  Strips comments starting
// with '#', skips blank lines, and reports the original line number of every
// retained row so parse errors can point at the source text.
struct GridLine {
  std::string text;
  int line_number;
};

inline std::vector<GridLine> scan_grid_lines(const std::string& text) {
  std::vector<GridLine> rows;
  std::string current;
  int line_number = 1;
  auto flush = [&](int ln) {
    size_t hash = current.find('#');
    if (hash != std::string::npos) current.erase(hash);
    while (!current.empty() && (current.back() == ' ' || current.back() == '\t' ||
                                current.back() == '\r'))
      current.pop_back();
    if (!current.empty()) rows.push_back({current, ln});
    current.clear();
  };
  for (char ch : text) {
    if (ch == '\n') {
      flush(line_number);
      ++line_number;
    } else {
      current.push_back(ch);
    }
  }
  flush(line_number);
  return rows;
}

inline void check_rectangular(const std::vector<GridLine>& rows,
                              const char* what) {
  if (rows.empty())
    throw ParseError(std::string("no grid rows found in ") + what, 1, 1);
  const size_t width = rows.front().text.size();
  for (const auto& row : rows) {
    if (row.text.size() != width)
      throw ParseError(std::string("ragged row in ") + what + ": expected " +
                           std::to_string(width) + " characters, got " +
                           std::to_string(row.text.size()),
                       row.line_number, static_cast<int>(row.text.size()) + 1);
  }
}

}  // namespace detail

// Pattern text format: one character per site, '.' don't-care, 'T' target,
// 'x' exclusion.  '#' starts a comment, blank lines are ignored, and all
// retained rows must have equal length.
inline TargetPattern parse_pattern(const std::string& text) {
  auto rows = detail::scan_grid_lines(text);
  detail::check_rectangular(rows, "pattern");
  TargetPattern pattern(static_cast<int>(rows.size()),
                        static_cast<int>(rows.front().text.size()));
  for (int r = 0; r < pattern.rows(); ++r) {
    for (int c = 0; c < pattern.cols(); ++c) {
      switch (rows[r].text[c]) {
        case '.':
          break;
        case 'T':
          pattern.mark_target({r, c});
          break;
        case 'x':
          pattern.mark_exclusion({r, c});
          break;
        default:
          throw ParseError(std::string("unexpected pattern character '") +
                               rows[r].text[c] + "'",
                           rows[r].line_number, c + 1);
      }
    }
  }
  return pattern;
}

inline std::string emit_pattern(const TargetPattern& pattern) {
  std::string out;
  out.reserve(static_cast<size_t>(pattern.rows()) * (pattern.cols() + 1));
  for (int r = 0; r < pattern.rows(); ++r) {
    for (int c = 0; c < pattern.cols(); ++c) {
      SiteIndex s{r, c};
      out.push_back(pattern.is_target(s) ? 'T'
                    : pattern.is_exclusion(s) ? 'x'
                                              : '.');
    }
    out.push_back('\n');
  }
  return out;
}

// Occupancy text format: 'o' occupied, '.' empty; comments and blank lines
// as in the pattern format.
inline OccupancyGrid parse_occupancy(const std::string& text) {
  auto rows = detail::scan_grid_lines(text);
  detail::check_rectangular(rows, "occupancy");
  OccupancyGrid grid(static_cast<int>(rows.size()),
                     static_cast<int>(rows.front().text.size()));
  for (int r = 0; r < grid.rows(); ++r) {
    for (int c = 0; c < grid.cols(); ++c) {
      switch (rows[r].text[c]) {
        case '.':
          break;
        case 'o':
          grid.set({r, c}, true);
          break;
        default:
          throw ParseError(std::string("unexpected occupancy character '") +
                               rows[r].text[c] + "'",
                           rows[r].line_number, c + 1);
      }
    }
  }
  return grid;
}

inline std::string emit_occupancy(const OccupancyGrid& grid) {
  std::string out;
  out.reserve(static_cast<size_t>(grid.rows()) * (grid.cols() + 1));
  for (int r = 0; r < grid.rows(); ++r) {
    for (int c = 0; c < grid.cols(); ++c)
      out.push_back(grid.occupied({r, c}) ? 'o' : '.');
    out.push_back('\n');
  }
  return out;
}

// Site census of a grid against a pattern.  Occupied sites partition into
// correctly occupied targets, reservoir atoms, and exclusion-zone
// violations; target sites partition into correctly occupied and vacant.
struct SiteClassification {
  int correctly_occupied = 0;
  int reservoir = 0;
  int vacant_targets = 0;
  int frame_violations = 0;
};

inline SiteClassification classify(const OccupancyGrid& grid,
                                   const TargetPattern& pattern) {
  if (grid.rows() != pattern.rows() || grid.cols() != pattern.cols())
    throw BoundsError("occupancy grid and pattern dimensions differ");
  SiteClassification out;
  for (int r = 0; r < grid.rows(); ++r) {
    for (int c = 0; c < grid.cols(); ++c) {
      SiteIndex s{r, c};
      const bool occ = grid.occupied(s);
      if (pattern.is_target(s)) {
        if (occ)
          ++out.correctly_occupied;
        else
          ++out.vacant_targets;
      } else if (pattern.is_exclusion(s)) {
        if (occ) ++out.frame_violations;
      } else if (occ) {
        ++out.reservoir;
      }
    }
  }
  return out;
}

}  // namespace tweezersim
