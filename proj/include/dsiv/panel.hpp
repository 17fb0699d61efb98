#pragma once

// Panel data: per-unit, per-time covariates x, treatments a, outcomes y.
//
// CSV layout (long format, one row per unit and time step):
//   unit,t,x0..x{dX-1},a0..a{dA-1},y[,z0..,c0..,u0..]
// `unit` is 0-based, `t` is 1-based. Values are written with 17 significant
// digits so a save/load cycle reproduces every double exactly. Latent columns
// (z, c, u) are diagnostics and are written only on request.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "dsiv/errors.hpp"

namespace dsiv {

enum class TreatmentKind { binary, continuous };

inline const char* to_string(TreatmentKind k) { return k == TreatmentKind::binary ? "binary" : "continuous"; }

/// Ground-truth latent states. Never handed to an estimator.
struct LatentBlock {
  std::size_t d_z = 0, d_c = 0, d_u = 0;
  std::vector<double> z, c, u;  // [n, T, d]
};

struct PanelDataset {
  std::size_t n = 0, T = 0, d_x = 0, d_a = 1;
  std::vector<double> x;  // [n, T, d_x]
  std::vector<double> a;  // [n, T, d_a]
  std::vector<double> y;  // [n, T]
  TreatmentKind treatment = TreatmentKind::binary;
  std::optional<LatentBlock> latent;

  double x_at(std::size_t i, std::size_t t, std::size_t k) const { return x[(i * T + t) * d_x + k]; }
  double a_at(std::size_t i, std::size_t t, std::size_t k = 0) const { return a[(i * T + t) * d_a + k]; }
  double y_at(std::size_t i, std::size_t t) const { return y[i * T + t]; }

  void validate() const {
    if (n == 0 || T == 0 || d_x == 0 || d_a == 0) throw DimensionError("panel dimensions must be positive");
    if (x.size() != n * T * d_x || a.size() != n * T * d_a || y.size() != n * T)
      throw DimensionError("panel array sizes do not match n=" + std::to_string(n) + ", T=" + std::to_string(T));
    auto finite = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [](double d) { return std::isfinite(d); });
    };
    if (!finite(x) || !finite(a) || !finite(y)) throw NumericDomainError("panel contains non-finite values");
    if (treatment == TreatmentKind::binary &&
        !std::all_of(a.begin(), a.end(), [](double v) { return v == 0.0 || v == 1.0; }))
      throw ContractError("binary panel has treatments outside {0,1}");
    if (latent) {
      const auto& l = *latent;
      if (l.z.size() != n * T * l.d_z || l.c.size() != n * T * l.d_c || l.u.size() != n * T * l.d_u)
        throw DimensionError("latent block sizes do not match the panel");
    }
  }

  double treatment_rate() const {
    double s = 0.0;
    for (double v : a) s += v;
    return a.empty() ? 0.0 : s / static_cast<double>(a.size());
  }

  double outcome_mean() const {
    double s = 0.0;
    for (double v : y) s += v;
    return s / static_cast<double>(y.size());
  }

  /// Population standard deviation of y.
  double outcome_std() const {
    const double m = outcome_mean();
    double s = 0.0;
    for (double v : y) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(y.size()));
  }
};

/// The observable part of a panel. Estimators only ever receive this type,
/// so latent columns cannot reach a training tensor.
struct ObservedPanel {
  std::size_t n = 0, T = 0, d_x = 0, d_a = 1;
  std::vector<double> x, a, y;
  TreatmentKind treatment = TreatmentKind::binary;

  double x_at(std::size_t i, std::size_t t, std::size_t k) const { return x[(i * T + t) * d_x + k]; }
  double a_at(std::size_t i, std::size_t t, std::size_t k = 0) const { return a[(i * T + t) * d_a + k]; }
  double y_at(std::size_t i, std::size_t t) const { return y[i * T + t]; }
};

inline ObservedPanel observe(const PanelDataset& ds) {
  ds.validate();
  return {ds.n, ds.T, ds.d_x, ds.d_a, ds.x, ds.a, ds.y, ds.treatment};
}

/// Units [begin, end) of a panel, latent block included.
inline PanelDataset select_units(const PanelDataset& ds, std::size_t begin, std::size_t end) {
  if (begin >= end || end > ds.n) throw DimensionError("unit range out of bounds");
  PanelDataset out = ds;
  out.n = end - begin;
  auto cut = [&](const std::vector<double>& v, std::size_t width) {
    return std::vector<double>(v.begin() + static_cast<long>(begin * ds.T * width),
                               v.begin() + static_cast<long>(end * ds.T * width));
  };
  out.x = cut(ds.x, ds.d_x);
  out.a = cut(ds.a, ds.d_a);
  out.y = cut(ds.y, 1);
  if (ds.latent) {
    out.latent->z = cut(ds.latent->z, ds.latent->d_z);
    out.latent->c = cut(ds.latent->c, ds.latent->d_c);
    out.latent->u = cut(ds.latent->u, ds.latent->d_u);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);  // shortest form that reads back exactly
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      cells.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return cells;
}

inline double parse_cell(std::string_view cell, std::size_t line, std::string_view column) {
  while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
  while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r')) cell.remove_suffix(1);
  double v = 0.0;
  if (!cell.empty() && cell.front() == '+') cell.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (cell.empty() || ec != std::errc() || ptr != cell.data() + cell.size())
    throw ParseError("non-numeric value '" + std::string(cell) + "' in column " + std::string(column), line);
  return v;
}

// Counts columns named prefix0, prefix1, ... that appear contiguously from `start`.
inline std::size_t count_prefixed(const std::vector<std::string>& header, std::size_t start, const std::string& prefix) {
  std::size_t k = 0;
  while (start + k < header.size() && header[start + k] == prefix + std::to_string(k)) ++k;
  return k;
}

}  // namespace detail

inline void write_panel_csv(std::ostream& os, const PanelDataset& ds, bool with_latent = false) {
  ds.validate();
  const bool latent = with_latent && ds.latent.has_value();
  os << "unit,t";
  for (std::size_t k = 0; k < ds.d_x; ++k) os << ",x" << k;
  for (std::size_t k = 0; k < ds.d_a; ++k) os << ",a" << k;
  os << ",y";
  if (latent) {
    for (std::size_t k = 0; k < ds.latent->d_z; ++k) os << ",z" << k;
    for (std::size_t k = 0; k < ds.latent->d_c; ++k) os << ",c" << k;
    for (std::size_t k = 0; k < ds.latent->d_u; ++k) os << ",u" << k;
  }
  os << '\n';
  for (std::size_t i = 0; i < ds.n; ++i)
    for (std::size_t t = 0; t < ds.T; ++t) {
      os << i << ',' << (t + 1);
      for (std::size_t k = 0; k < ds.d_x; ++k) os << ',' << format_double(ds.x_at(i, t, k));
      for (std::size_t k = 0; k < ds.d_a; ++k) os << ',' << format_double(ds.a_at(i, t, k));
      os << ',' << format_double(ds.y_at(i, t));
      if (latent) {
        const auto& l = *ds.latent;
        for (std::size_t k = 0; k < l.d_z; ++k) os << ',' << format_double(l.z[(i * ds.T + t) * l.d_z + k]);
        for (std::size_t k = 0; k < l.d_c; ++k) os << ',' << format_double(l.c[(i * ds.T + t) * l.d_c + k]);
        for (std::size_t k = 0; k < l.d_u; ++k) os << ',' << format_double(l.u[(i * ds.T + t) * l.d_u + k]);
      }
      os << '\n';
    }
}

inline PanelDataset read_panel_csv(std::istream& is) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(is, line)) throw ParseError("empty panel file", 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header;
  for (auto c : detail::split_csv_line(line)) header.emplace_back(c);

  auto expect = [&](std::size_t pos, const std::string& name) {
    if (pos >= header.size() || header[pos] != name) throw ParseError("missing column " + name, 1);
  };
  expect(0, "unit");
  expect(1, "t");
  PanelDataset ds;
  ds.d_x = detail::count_prefixed(header, 2, "x");
  if (ds.d_x == 0) throw ParseError("missing column x0", 1);
  ds.d_a = detail::count_prefixed(header, 2 + ds.d_x, "a");
  if (ds.d_a == 0) throw ParseError("missing column a0", 1);
  const std::size_t y_col = 2 + ds.d_x + ds.d_a;
  expect(y_col, "y");
  std::size_t pos = y_col + 1;
  LatentBlock lat;
  lat.d_z = detail::count_prefixed(header, pos, "z");
  pos += lat.d_z;
  lat.d_c = detail::count_prefixed(header, pos, "c");
  pos += lat.d_c;
  lat.d_u = detail::count_prefixed(header, pos, "u");
  pos += lat.d_u;
  if (pos != header.size()) throw ParseError("unexpected column " + header[pos], 1);
  const bool has_latent = lat.d_z + lat.d_c + lat.d_u > 0;

  std::size_t expected_unit = 0, expected_t = 1;
  std::size_t T = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("expected " + std::to_string(header.size()) + " cells, found " + std::to_string(cells.size()),
                       line_no);
    const double unit = detail::parse_cell(cells[0], line_no, "unit");
    const double t = detail::parse_cell(cells[1], line_no, "t");
    if (t == 1.0 && expected_t != 1) {
      if (T == 0) T = expected_t - 1;
      if (expected_t - 1 != T) throw ParseError("unit " + std::to_string(expected_unit) + " has a ragged series", line_no);
      ++expected_unit;
      expected_t = 1;
    }
    if (unit != static_cast<double>(expected_unit) || t != static_cast<double>(expected_t))
      throw ParseError("expected unit " + std::to_string(expected_unit) + " at t=" + std::to_string(expected_t),
                       line_no);
    ++expected_t;
    std::size_t c = 2;
    for (std::size_t k = 0; k < ds.d_x; ++k, ++c) ds.x.push_back(detail::parse_cell(cells[c], line_no, header[c]));
    for (std::size_t k = 0; k < ds.d_a; ++k, ++c) ds.a.push_back(detail::parse_cell(cells[c], line_no, header[c]));
    ds.y.push_back(detail::parse_cell(cells[c], line_no, header[c]));
    ++c;
    for (std::size_t k = 0; k < lat.d_z; ++k, ++c) lat.z.push_back(detail::parse_cell(cells[c], line_no, header[c]));
    for (std::size_t k = 0; k < lat.d_c; ++k, ++c) lat.c.push_back(detail::parse_cell(cells[c], line_no, header[c]));
    for (std::size_t k = 0; k < lat.d_u; ++k, ++c) lat.u.push_back(detail::parse_cell(cells[c], line_no, header[c]));
  }
  if (expected_t == 1) throw ParseError("panel has no data rows", line_no);
  if (T == 0) T = expected_t - 1;
  if (expected_t - 1 != T) throw ParseError("unit " + std::to_string(expected_unit) + " has a ragged series", line_no);
  ds.T = T;
  ds.n = expected_unit + 1;
  const bool binary = std::all_of(ds.a.begin(), ds.a.end(), [](double v) { return v == 0.0 || v == 1.0; });
  ds.treatment = binary ? TreatmentKind::binary : TreatmentKind::continuous;
  if (has_latent) ds.latent = std::move(lat);
  ds.validate();
  return ds;
}

inline void save_panel(const PanelDataset& ds, const std::filesystem::path& path, bool with_latent = false) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_panel_csv(os, ds, with_latent);
  if (!os) throw IoError("write failed for " + path.string());
}

inline PanelDataset load_panel(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  return read_panel_csv(is);
}

/// Summary document written next to a panel CSV.
inline nlohmann::json panel_metadata(const PanelDataset& ds) {
  return {{"n", ds.n},
          {"T", ds.T},
          {"d_x", ds.d_x},
          {"d_a", ds.d_a},
          {"treatment_kind", to_string(ds.treatment)},
          {"treatment_rate", ds.treatment_rate()},
          {"y_mean", ds.outcome_mean()},
          {"y_std", ds.outcome_std()},
          {"has_latent", ds.latent.has_value()}};
}

}  // namespace dsiv
