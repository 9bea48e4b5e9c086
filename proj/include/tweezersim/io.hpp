#pragma once

// Data emission and ingestion.  CSV files carry their provenance as leading
// '# key = value' comment lines (the fully resolved configuration plus the
// seed), then a header row and one row per sample, all numbers with nine
// significant digits.  JSON reports go through nlohmann::ordered_json so key
// order, and therefore the output bytes, are deterministic.

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tweezersim/dynamics.hpp"
#include "tweezersim/errors.hpp"

namespace tweezersim {

using json = nlohmann::ordered_json;

inline std::string format_g9(double value) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", value);
  return buf;
}

namespace detail {

inline std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cell;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cell);
      cell.clear();
    } else {
      cell.push_back(ch);
    }
  }
  out.push_back(cell);
  return out;
}

inline double parse_double(const std::string& text, int line) {
  try {
    size_t pos = 0;
    const double v = std::stod(text, &pos);
    if (trim(text.substr(pos)).empty()) return v;
  } catch (const std::exception&) {
  }
  throw ParseError("'" + text + "' is not a number", line, 1);
}

}  // namespace detail

inline void write_csv(std::ostream& os, const TimeSeries& series) {
  for (const auto& [key, value] : series.metadata)
    if (key != "n_atoms") os << "# " << key << " = " << value << "\n";
  os << "# n_atoms = " << series.n_atoms << "\n";
  os << "time_us";
  for (const auto& name : series.columns) os << "," << name;
  os << "\n";
  for (size_t s = 0; s < series.times_us.size(); ++s) {
    os << format_g9(series.times_us[s]);
    for (size_t c = 0; c < series.values.size(); ++c)
      os << "," << format_g9(series.values[c][s]);
    os << "\n";
  }
}

inline void write_csv_file(const std::string& path, const TimeSeries& series) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_csv(os, series);
  if (!os) throw IoError("write to '" + path + "' failed");
}

inline TimeSeries read_csv(std::istream& is) {
  TimeSeries series;
  std::string line;
  int line_number = 0;
  bool header_seen = false;

  while (std::getline(is, line)) {
    ++line_number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string text = detail::trim(line);
    if (text.empty()) continue;

    if (text.front() == '#') {
      const std::string body = detail::trim(text.substr(1));
      const size_t eq = body.find('=');
      if (eq != std::string::npos) {
        const std::string key = detail::trim(body.substr(0, eq));
        const std::string value = detail::trim(body.substr(eq + 1));
        if (key == "n_atoms")
          series.n_atoms =
              static_cast<int>(detail::parse_double(value, line_number));
        else if (!key.empty())
          series.metadata[key] = value;
      }
      continue;
    }

    const std::vector<std::string> cells = detail::split(text, ',');
    if (!header_seen) {
      if (cells.empty() || detail::trim(cells[0]) != "time_us")
        throw ParseError("header must start with time_us", line_number, 1);
      for (size_t i = 1; i < cells.size(); ++i)
        series.columns.push_back(detail::trim(cells[i]));
      series.values.assign(series.columns.size(), {});
      header_seen = true;
      continue;
    }

    if (cells.size() != series.columns.size() + 1)
      throw ParseError("row has " + std::to_string(cells.size()) +
                           " cells, header has " +
                           std::to_string(series.columns.size() + 1),
                       line_number, 1);
    series.times_us.push_back(detail::parse_double(cells[0], line_number));
    for (size_t i = 1; i < cells.size(); ++i)
      series.values[i - 1].push_back(
          detail::parse_double(cells[i], line_number));
  }

  if (!header_seen) throw ParseError("no header row found", 1, 1);
  return series;
}

inline TimeSeries read_csv_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "' for reading");
  return read_csv(is);
}

inline void write_json_file(const std::string& path, const json& value) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os << value.dump(2) << "\n";
  if (!os) throw IoError("write to '" + path + "' failed");
}

// Wilson score interval for a binomial proportion, 95% by default.  Stays
// inside [0, 1] and behaves sensibly at 0 and n successes, unlike the
// normal approximation.
struct ProportionInterval {
  double low = 0.0;
  double high = 1.0;
};

inline ProportionInterval wilson_interval(long successes, long trials,
                                          double z = 1.959963985) {
  if (trials < 1) throw ConfigError("interval needs at least one trial");
  if (successes < 0 || successes > trials)
    throw ConfigError("successes must lie in [0, trials]");
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double center = (p + z2 / (2.0 * n)) / denom;
  const double half =
      z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  return {center - half, center + half};
}

}  // namespace tweezersim
