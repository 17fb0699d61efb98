#pragma once

// Synthetic confounded panels.
//
// Latent state V_t = {Z_t (instruments), C_t (confounders), U_t (unobserved)}
// drifts as
//   Z_{t+1} = 0.4 Z_t + 0.6 Z' + 0.3 sin t,   Z' ~ U(0, h)
//   C_{t+1} = 0.3 C_t + 0.7 C' + 0.2 sin t,   C' ~ U(0, h)
//   U_{t+1} = U' - 0.1 cos t,                 U' ~ N(0, 1)
// with h = 1 for the one-step generator and h = 3 for the decision generator.
// Treatments follow logit = sum_i(coef_a_i V_i - cos V_i^2) - 0.5 A_t + 0.2 Y_t
// - 0.1 sin t with A_{t+1} = 1 iff sigmoid(logit) >= 0.5, or a fair coin under
// the random policy. Outcomes depend on V'_t = {C_t, U_t, U_{t-1}}.
//
// Row s of a generated panel (0-based) holds X_{s+1}, A_{s+1}, Y_{s+1}; the
// initial state V_0 is drawn but not recorded, and A_0 = Y_0 = 0, U_{-1} = 0.
// Every unit draws from its own substream keyed by (seed, split, unit), so
// datasets do not depend on generation order.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsiv/errors.hpp"
#include "dsiv/panel.hpp"
#include "dsiv/rng.hpp"

namespace dsiv::sim {

enum class GeneratorKind { one_step, decision };
enum class MixingMode { concat, orthogonal_mix };
enum class TreatmentPolicy { observational, random };
/// How C-bar in the outcome equation is read: the current C_t, or an
/// exponentially discounted running average of C_1..C_t.
enum class ConfounderSummary { current, discounted };

struct GenConfig {
  GeneratorKind kind = GeneratorKind::one_step;
  std::size_t d_z = 3, d_c = 7, d_u = 3;
  std::size_t T = 100;
  std::size_t n_train = 10000, n_val = 1000, n_test = 1000;
  std::uint64_t coef_seed = 1;
  std::uint64_t traj_seed = 2;
  MixingMode mixing = MixingMode::concat;
  TreatmentPolicy test_policy = TreatmentPolicy::random;
  ConfounderSummary confounder_summary = ConfounderSummary::current;
  double discount = 0.5;
  double latent_high = 1.0;  ///< Z and C draws are U(0, latent_high)
  std::size_t tau = 5;       ///< decision window (decision)
  std::size_t history = 25;  ///< observed prefix of decision test units (decision)

  static GenConfig one_step() { return {}; }

  static GenConfig decision() {
    GenConfig c;
    c.kind = GeneratorKind::decision;
    c.d_z = 3;
    c.d_c = 12;
    c.d_u = 5;
    c.T = 30;
    c.n_train = 2000;
    c.n_val = 200;
    c.n_test = 100;
    c.latent_high = 3.0;
    return c;
  }

  std::size_t d_x() const { return d_z + d_c; }

  void validate() const {
    if (d_z == 0 || d_c == 0 || d_u == 0) throw ConfigError("latent dimensions must be positive");
    if (T == 0) throw ConfigError("sequence length must be positive");
    if (n_train == 0 || n_val == 0 || n_test == 0) throw ConfigError("split sizes must be positive");
    if (!(latent_high > 0.0)) throw ConfigError("latent_high must be positive");
    if (!(discount >= 0.0 && discount < 1.0)) throw ConfigError("discount must be in [0,1)");
    if (kind == GeneratorKind::decision) {
      if (tau == 0 || tau > 20) throw ConfigError("tau must be in [1,20]");
      if (history == 0 || history + tau > T) throw ConfigError("history + tau must not exceed T");
    }
  }
};

inline const char* to_string(GeneratorKind k) { return k == GeneratorKind::one_step ? "one-step" : "decision"; }
inline const char* to_string(MixingMode m) { return m == MixingMode::concat ? "concat" : "orthogonal-mix"; }
inline const char* to_string(TreatmentPolicy p) { return p == TreatmentPolicy::observational ? "observational" : "random"; }
inline const char* to_string(ConfounderSummary s) { return s == ConfounderSummary::current ? "current" : "discounted"; }

inline nlohmann::json to_json(const GenConfig& c) {
  return {{"kind", to_string(c.kind)},
          {"d_z", c.d_z},
          {"d_c", c.d_c},
          {"d_u", c.d_u},
          {"T", c.T},
          {"n_train", c.n_train},
          {"n_val", c.n_val},
          {"n_test", c.n_test},
          {"coef_seed", c.coef_seed},
          {"traj_seed", c.traj_seed},
          {"mixing", to_string(c.mixing)},
          {"test_policy", to_string(c.test_policy)},
          {"confounder_summary", to_string(c.confounder_summary)},
          {"discount", c.discount},
          {"latent_high", c.latent_high},
          {"tau", c.tau},
          {"history", c.history}};
}

/// Fixed by the coefficient seed; shared by every split.
struct Coefficients {
  std::vector<double> coef_a;    ///< over V  = {Z, C, U}: d_z + d_c + d_u
  std::vector<double> coef_y;    ///< over V' = {C, U_t, U_{t-1}}: d_c + 2 d_u
  std::vector<double> coef_seq;  ///< lags 0..4 of A (decision)
  std::vector<double> mixing;    ///< d_x x d_x orthogonal matrix (orthogonal-mix)
};

inline Coefficients draw_coefficients(const GenConfig& cfg) {
  const Rng root(cfg.coef_seed);
  Coefficients c;
  Rng ra = root.substream("coef_a"), ry = root.substream("coef_y"), rs = root.substream("coef_seq");
  for (std::size_t i = 0; i < cfg.d_z + cfg.d_c + cfg.d_u; ++i) c.coef_a.push_back(ra.uniform(-1.0, 1.0));
  for (std::size_t i = 0; i < cfg.d_c + 2 * cfg.d_u; ++i) c.coef_y.push_back(ry.uniform(-1.0, 1.0));
  for (std::size_t i = 0; i < 5; ++i) c.coef_seq.push_back(rs.uniform(-1.0, 1.0));
  if (cfg.mixing == MixingMode::orthogonal_mix) {
    // Gram-Schmidt on a Gaussian matrix, row by row.
    const std::size_t d = cfg.d_x();
    Rng rm = root.substream("mixing");
    std::vector<double> q(d * d);
    for (auto& v : q) v = rm.normal();
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += q[i * d + k] * q[j * d + k];
        for (std::size_t k = 0; k < d; ++k) q[i * d + k] -= dot * q[j * d + k];
      }
      double norm = 0.0;
      for (std::size_t k = 0; k < d; ++k) norm += q[i * d + k] * q[i * d + k];
      norm = std::sqrt(norm);
      for (std::size_t k = 0; k < d; ++k) q[i * d + k] /= norm;
    }
    c.mixing = std::move(q);
  }
  return c;
}

inline double treatment_logit(std::span<const double> v, double a_prev, double y_prev, std::span<const double> coef_a,
                              std::size_t t) {
  if (v.size() != coef_a.size()) throw DimensionError("state and coef_a widths differ");
  double logit = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) logit += coef_a[i] * v[i] - std::cos(v[i] * v[i]);
  return logit - 0.5 * a_prev + 0.2 * y_prev - 0.1 * std::sin(static_cast<double>(t));
}

/// A_{t+1} given V_t, A_t, Y_t. Observational: 1 iff sigmoid(logit) >= 0.5.
inline int assign_treatment(std::span<const double> v, double a_prev, double y_prev, std::span<const double> coef_a,
                            std::size_t t, TreatmentPolicy policy, Rng& rng) {
  if (policy == TreatmentPolicy::random) return rng.uniform() < 0.5 ? 1 : 0;
  const double logit = treatment_logit(v, a_prev, y_prev, coef_a, t);
  const double p = 1.0 / (1.0 + std::exp(-logit));
  return p >= 0.5 ? 1 : 0;
}

/// Y_{t+1}. `a_recent` holds A_{t+1}, A_t, ..., most recent first; the
/// one-step formula reads only A_{t+1}, the decision formula reads 5 lags.
inline double generate_outcome(std::span<const double> v_prime, std::span<const double> a_recent,
                               const Coefficients& coef, std::size_t t, GeneratorKind kind) {
  if (v_prime.size() != coef.coef_y.size()) throw DimensionError("V' and coef_y widths differ");
  double lin = 0.0;
  for (std::size_t i = 0; i < v_prime.size(); ++i) lin += coef.coef_y[i] * v_prime[i];
  const double td = static_cast<double>(t);
  if (kind == GeneratorKind::one_step) return lin - 0.2 * std::sin(a_recent[0]) + 0.5 * std::sin(td / 5.0);
  double seq = 0.0;
  for (std::size_t j = 0; j < 5 && j < a_recent.size(); ++j) seq += coef.coef_seq[j] * a_recent[j];
  return 0.2 * lin - 0.5 * seq + std::sin(td);
}

/// One simulated unit: rows 0..T-1 plus the latent state of each row.
struct UnitSeries {
  std::vector<double> x, a, y, z, c, u;
};

/// Simulates one unit for `T` rows. Rows >= `forced_from` take their treatment
/// from `forced` (index 0 = row forced_from) instead of the policy.
inline UnitSeries simulate_unit(const GenConfig& cfg, const Coefficients& coef, Rng rng, std::size_t T,
                                TreatmentPolicy policy, std::size_t forced_from = SIZE_MAX,
                                std::span<const double> forced = {}) {
  const std::size_t dz = cfg.d_z, dc = cfg.d_c, du = cfg.d_u, dx = cfg.d_x();
  const double hi = cfg.latent_high;
  std::vector<double> z(dz), c(dc), u(du), u_prev(du, 0.0), cbar(dc);
  for (auto& v : z) v = rng.uniform(0.0, hi);
  for (auto& v : c) v = rng.uniform(0.0, hi);
  for (auto& v : u) v = rng.normal();
  cbar = c;
  std::vector<double> a_hist(5, 0.0);  // A_{t+1}, A_t, ... most recent first
  double a_prev = 0.0, y_prev = 0.0;

  UnitSeries out;
  std::vector<double> v(dz + dc + du), vp(dc + 2 * du);
  for (std::size_t s = 0; s < T; ++s) {
    std::copy(z.begin(), z.end(), v.begin());
    std::copy(c.begin(), c.end(), v.begin() + static_cast<long>(dz));
    std::copy(u.begin(), u.end(), v.begin() + static_cast<long>(dz + dc));
    double a_next;
    if (s >= forced_from) {
      a_next = forced[s - forced_from];
    } else {
      a_next = assign_treatment(v, a_prev, y_prev, coef.coef_a, s, policy, rng);
    }
    for (std::size_t j = 4; j > 0; --j) a_hist[j] = a_hist[j - 1];
    a_hist[0] = a_next;

    const auto& csum = cfg.confounder_summary == ConfounderSummary::current ? c : cbar;
    std::copy(csum.begin(), csum.end(), vp.begin());
    std::copy(u.begin(), u.end(), vp.begin() + static_cast<long>(dc));
    std::copy(u_prev.begin(), u_prev.end(), vp.begin() + static_cast<long>(dc + du));
    const double y_next = generate_outcome(vp, a_hist, coef, s, cfg.kind);

    const double st = std::sin(static_cast<double>(s)), ct = std::cos(static_cast<double>(s));
    u_prev = u;
    for (auto& e : z) e = 0.4 * e + 0.6 * rng.uniform(0.0, hi) + 0.3 * st;
    for (auto& e : c) e = 0.3 * e + 0.7 * rng.uniform(0.0, hi) + 0.2 * st;
    for (auto& e : u) e = rng.normal() - 0.1 * ct;
    for (std::size_t k = 0; k < dc; ++k) cbar[k] = cfg.discount * cbar[k] + (1.0 - cfg.discount) * c[k];

    a_prev = a_next;
    y_prev = y_next;
    if (cfg.mixing == MixingMode::concat) {
      out.x.insert(out.x.end(), z.begin(), z.end());
      out.x.insert(out.x.end(), c.begin(), c.end());
    } else {
      std::vector<double> zc(z);
      zc.insert(zc.end(), c.begin(), c.end());
      for (std::size_t r = 0; r < dx; ++r) {
        double acc = 0.0;
        for (std::size_t k = 0; k < dx; ++k) acc += coef.mixing[r * dx + k] * zc[k];
        out.x.push_back(acc);
      }
    }
    out.a.push_back(a_next);
    out.y.push_back(y_next);
    out.z.insert(out.z.end(), z.begin(), z.end());
    out.c.insert(out.c.end(), c.begin(), c.end());
    out.u.insert(out.u.end(), u.begin(), u.end());
  }
  return out;
}

inline Rng unit_stream(std::uint64_t seed, std::string_view split, std::size_t unit) {
  return Rng(seed).substream(split).substream(static_cast<std::uint64_t>(unit));
}

/// `n` units of length cfg.T under `policy`, latent block attached.
inline PanelDataset generate_simulation(const GenConfig& cfg, std::uint64_t seed, std::size_t n,
                                        TreatmentPolicy policy, std::string_view split = "train") {
  cfg.validate();
  if (n == 0) throw ConfigError("unit count must be positive");
  const auto coef = draw_coefficients(cfg);
  PanelDataset ds;
  ds.n = n;
  ds.T = cfg.T;
  ds.d_x = cfg.d_x();
  ds.d_a = 1;
  ds.treatment = TreatmentKind::binary;
  LatentBlock lat{cfg.d_z, cfg.d_c, cfg.d_u, {}, {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    auto s = simulate_unit(cfg, coef, unit_stream(seed, split, i), cfg.T, policy);
    ds.x.insert(ds.x.end(), s.x.begin(), s.x.end());
    ds.a.insert(ds.a.end(), s.a.begin(), s.a.end());
    ds.y.insert(ds.y.end(), s.y.begin(), s.y.end());
    lat.z.insert(lat.z.end(), s.z.begin(), s.z.end());
    lat.c.insert(lat.c.end(), s.c.begin(), s.c.end());
    lat.u.insert(lat.u.end(), s.u.begin(), s.u.end());
  }
  ds.latent = std::move(lat);
  return ds;
}

struct Splits {
  PanelDataset train, val, test;
};

/// Train/val under the observational policy, test under cfg.test_policy.
inline Splits generate_splits(const GenConfig& cfg) {
  return {generate_simulation(cfg, cfg.traj_seed, cfg.n_train, TreatmentPolicy::observational, "train"),
          generate_simulation(cfg, cfg.traj_seed, cfg.n_val, TreatmentPolicy::observational, "val"),
          generate_simulation(cfg, cfg.traj_seed, cfg.n_test, cfg.test_policy, "test")};
}

// ---------------------------------------------------------------------------
// Decision-making test set

/// Candidate b applies treatment bit (tau-1-k) of b at window step k, so
/// numeric order of b is lexicographic order of the sequences.
inline std::vector<double> candidate_sequence(std::size_t b, std::size_t tau) {
  std::vector<double> seq(tau);
  for (std::size_t k = 0; k < tau; ++k) seq[k] = static_cast<double>((b >> (tau - 1 - k)) & 1U);
  return seq;
}

inline std::string candidate_label(std::size_t b, std::size_t tau) {
  std::string s;
  for (double v : candidate_sequence(b, tau)) s.push_back(v != 0.0 ? '1' : '0');
  return s;
}

struct OracleDecisionSet {
  std::size_t tau = 5;
  std::size_t history = 25;
  /// Observed prefix, rows 0..history-1 (latent attached for diagnostics).
  PanelDataset history_panel;
  /// Covariates of rows history..history+tau-2: [n, tau-1, d_x].
  std::vector<double> window_x;
  /// Latent state of rows history..history+tau-1: [n, tau, d].
  LatentBlock window_latent;
  /// Terminal outcome per candidate: [n, 2^tau].
  std::vector<double> outcomes;
  std::vector<double> oracle;
  std::vector<std::size_t> best;

  std::size_t n() const { return history_panel.n; }
  std::size_t candidates() const { return std::size_t{1} << tau; }
  double outcome(std::size_t unit, std::size_t b) const { return outcomes[unit * candidates() + b]; }
};

struct DecisionData {
  PanelDataset train, val;
  OracleDecisionSet test;
};

inline OracleDecisionSet generate_oracle_set(const GenConfig& cfg, std::uint64_t seed, std::size_t n) {
  cfg.validate();
  if (cfg.kind != GeneratorKind::decision) throw ConfigError("decision data needs the decision generator");
  const auto coef = draw_coefficients(cfg);
  const std::size_t H = cfg.history, tau = cfg.tau, horizon = H + tau, nb = std::size_t{1} << tau;
  OracleDecisionSet set;
  set.tau = tau;
  set.history = H;
  auto& hp = set.history_panel;
  hp.n = n;
  hp.T = H;
  hp.d_x = cfg.d_x();
  hp.d_a = 1;
  LatentBlock lat{cfg.d_z, cfg.d_c, cfg.d_u, {}, {}, {}};
  set.window_latent = {cfg.d_z, cfg.d_c, cfg.d_u, {}, {}, {}};
  const std::size_t dx = cfg.d_x();
  for (std::size_t i = 0; i < n; ++i) {
    const Rng stream = unit_stream(seed, "test", i);
    // Observational prefix, then every candidate rolled forward on the same draws.
    const auto base = simulate_unit(cfg, coef, stream, H, TreatmentPolicy::observational);
    hp.x.insert(hp.x.end(), base.x.begin(), base.x.end());
    hp.a.insert(hp.a.end(), base.a.begin(), base.a.end());
    hp.y.insert(hp.y.end(), base.y.begin(), base.y.end());
    lat.z.insert(lat.z.end(), base.z.begin(), base.z.end());
    lat.c.insert(lat.c.end(), base.c.begin(), base.c.end());
    lat.u.insert(lat.u.end(), base.u.begin(), base.u.end());
    double best_val = -std::numeric_limits<double>::infinity();
    std::size_t best_b = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      const auto seq = candidate_sequence(b, tau);
      const auto full = simulate_unit(cfg, coef, stream, horizon, TreatmentPolicy::observational, H, seq);
      if (b == 0) {
        set.window_x.insert(set.window_x.end(), full.x.begin() + static_cast<long>(H * dx),
                            full.x.begin() + static_cast<long>((horizon - 1) * dx));
        auto tail = [&](const std::vector<double>& v, std::size_t d, std::vector<double>& dst) {
          dst.insert(dst.end(), v.begin() + static_cast<long>(H * d), v.end());
        };
        tail(full.z, cfg.d_z, set.window_latent.z);
        tail(full.c, cfg.d_c, set.window_latent.c);
        tail(full.u, cfg.d_u, set.window_latent.u);
      }
      const double terminal = full.y.back();
      set.outcomes.push_back(terminal);
      if (terminal > best_val) {
        best_val = terminal;
        best_b = b;
      }
    }
    set.oracle.push_back(best_val);
    set.best.push_back(best_b);
  }
  hp.latent = std::move(lat);
  hp.validate();
  return set;
}

inline DecisionData generate_decision_dataset(const GenConfig& cfg) {
  cfg.validate();
  if (cfg.kind != GeneratorKind::decision) throw ConfigError("decision data needs the decision generator");
  return {generate_simulation(cfg, cfg.traj_seed, cfg.n_train, TreatmentPolicy::observational, "train"),
          generate_simulation(cfg, cfg.traj_seed, cfg.n_val, TreatmentPolicy::observational, "val"),
          generate_oracle_set(cfg, cfg.traj_seed, cfg.n_test)};
}

// Oracle files: <stem>_history.csv (panel), <stem>_covariates.csv
// (unit,t,x0..), <stem>_oracle.csv (unit,y_<seq>...,oracle,best).

inline void save_oracle_set(const OracleDecisionSet& set, const std::filesystem::path& dir, const std::string& stem,
                            bool with_latent = false) {
  save_panel(set.history_panel, dir / (stem + "_history.csv"), with_latent);
  const std::size_t dx = set.history_panel.d_x;
  {
    std::ofstream os(dir / (stem + "_covariates.csv"));
    if (!os) throw IoError("cannot write covariates to " + dir.string());
    os << "unit,t";
    for (std::size_t k = 0; k < dx; ++k) os << ",x" << k;
    os << '\n';
    for (std::size_t i = 0; i < set.n(); ++i)
      for (std::size_t s = 0; s + 1 < set.tau; ++s) {
        os << i << ',' << (set.history + s + 1);
        for (std::size_t k = 0; k < dx; ++k)
          os << ',' << format_double(set.window_x[(i * (set.tau - 1) + s) * dx + k]);
        os << '\n';
      }
  }
  std::ofstream os(dir / (stem + "_oracle.csv"));
  if (!os) throw IoError("cannot write oracle table to " + dir.string());
  os << "unit";
  for (std::size_t b = 0; b < set.candidates(); ++b) os << ",y_" << candidate_label(b, set.tau);
  os << ",oracle,best\n";
  for (std::size_t i = 0; i < set.n(); ++i) {
    os << i;
    for (std::size_t b = 0; b < set.candidates(); ++b) os << ',' << format_double(set.outcome(i, b));
    os << ',' << format_double(set.oracle[i]) << ',' << candidate_label(set.best[i], set.tau) << '\n';
  }
  if (!os) throw IoError("write failed in " + dir.string());
}

inline OracleDecisionSet load_oracle_set(const std::filesystem::path& dir, const std::string& stem) {
  OracleDecisionSet set;
  set.history_panel = load_panel(dir / (stem + "_history.csv"));
  set.history = set.history_panel.T;
  const std::size_t dx = set.history_panel.d_x;

  std::ifstream oracle(dir / (stem + "_oracle.csv"));
  if (!oracle) throw IoError("cannot open " + (dir / (stem + "_oracle.csv")).string());
  std::string line;
  std::getline(oracle, line);
  const auto header = dsiv::detail::split_csv_line(line);
  if (header.size() < 5 || header.front() != "unit") throw ParseError("malformed oracle header", 1);
  const std::size_t nb = header.size() - 3;
  std::size_t tau = 0;
  while ((std::size_t{1} << tau) < nb) ++tau;
  if ((std::size_t{1} << tau) != nb) throw ParseError("oracle table candidate count is not a power of two", 1);
  set.tau = tau;
  std::size_t line_no = 1;
  while (std::getline(oracle, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = dsiv::detail::split_csv_line(line);
    if (cells.size() != header.size()) throw ParseError("ragged oracle row", line_no);
    for (std::size_t b = 0; b < nb; ++b) set.outcomes.push_back(dsiv::detail::parse_cell(cells[1 + b], line_no, "y"));
    set.oracle.push_back(dsiv::detail::parse_cell(cells[1 + nb], line_no, "oracle"));
    std::size_t best = 0;
    for (char ch : cells[2 + nb]) {
      if (ch != '0' && ch != '1') throw ParseError("malformed best sequence", line_no);
      best = (best << 1) | static_cast<std::size_t>(ch == '1');
    }
    set.best.push_back(best);
  }
  if (set.oracle.size() != set.history_panel.n) throw ParseError("oracle rows do not match history units", line_no);

  std::ifstream cov(dir / (stem + "_covariates.csv"));
  if (!cov) throw IoError("cannot open " + (dir / (stem + "_covariates.csv")).string());
  std::getline(cov, line);
  line_no = 1;
  while (std::getline(cov, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = dsiv::detail::split_csv_line(line);
    if (cells.size() != dx + 2) throw ParseError("ragged covariate row", line_no);
    for (std::size_t k = 0; k < dx; ++k) set.window_x.push_back(dsiv::detail::parse_cell(cells[2 + k], line_no, "x"));
  }
  if (set.window_x.size() != set.n() * (tau - 1) * dx)
    throw ParseError("covariate rows do not cover the decision window", line_no);
  return set;
}

}  // namespace dsiv::sim
