#pragma once

// Evaluation harness: one-step counterfactual error over seeds, the
// alpha/beta grid, and tau-step decisions scored against oracle tables.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsiv/cfr.hpp"
#include "dsiv/errors.hpp"
#include "dsiv/panel.hpp"
#include "dsiv/rng.hpp"
#include "dsiv/simgen.hpp"

namespace dsiv::bench {

/// Counterfactual MSE over every (unit, time) cell, original outcome scale.
inline double evaluate_one_step(const DsivModel& m, const ObservedPanel& test) {
  if (!(dims_of(test) == m.dims())) throw ConfigError("test data dimensions do not match the model");
  if (m.mode != TrainMode::one_step) throw ConfigError("model was trained for decisions, not one-step prediction");
  return window_mse(m, test, WindowSpec::one_step(test.T));
}

inline std::string fingerprint(const nlohmann::json& j) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(name_id(j.dump())));
  return buf;
}

inline double sample_mean(const std::vector<double>& v) {
  return v.empty() ? std::numeric_limits<double>::quiet_NaN()
                   : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// n-1 denominator; 0 for a single value.
inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return v.empty() ? std::numeric_limits<double>::quiet_NaN() : 0.0;
  const double m = sample_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

struct EvalReport {
  std::vector<std::uint64_t> seeds;    ///< seeds that finished
  std::vector<double> per_seed;        ///< test MSE per finished seed
  std::vector<std::uint64_t> failed;   ///< seeds whose run diverged
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
  std::string fingerprint;

  bool complete() const { return failed.empty(); }

  void recompute() {
    mean = sample_mean(per_seed);
    std = sample_std(per_seed);
  }

  std::string summary_line() const {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "MSE = %.6f \xC2\xB1 %.6f (%zu seeds)", mean, std, per_seed.size());
    std::string s = buf;
    if (!complete()) s += " [incomplete: " + std::to_string(failed.size()) + " diverged]";
    return s;
  }

  nlohmann::json to_json() const {
    return {{"seeds", seeds}, {"per_seed", per_seed}, {"failed", failed},     {"mean", mean},
            {"std", std},     {"complete", complete()}, {"fingerprint", fingerprint}};
  }
};

using SeedRun = std::function<double(std::uint64_t seed)>;

/// One run per seed; a diverging seed is recorded in `failed`.
inline EvalReport multi_seed(const SeedRun& run, const std::vector<std::uint64_t>& seeds,
                             std::string fingerprint_value = {}) {
  if (seeds.size() < 2) throw ConfigError("multi-seed evaluation needs at least 2 seeds");
  EvalReport r;
  r.fingerprint = std::move(fingerprint_value);
  for (auto s : seeds) {
    try {
      const double v = run(s);
      r.seeds.push_back(s);
      r.per_seed.push_back(v);
    } catch (const TrainingError&) {
      r.failed.push_back(s);
    }
  }
  r.recompute();
  return r;
}

struct SweepGrid {
  std::vector<double> alphas, betas;
  std::vector<EvalReport> cells;  ///< row-major: alpha index major

  const EvalReport& cell(std::size_t ia, std::size_t ib) const { return cells.at(ia * betas.size() + ib); }

  /// (alpha index, beta index) of the lowest mean.
  std::pair<std::size_t, std::size_t> argmin() const {
    std::size_t best = 0;
    for (std::size_t k = 1; k < cells.size(); ++k)
      if (cells[k].mean < cells[best].mean) best = k;
    return {best / betas.size(), best % betas.size()};
  }

  void write_csv(std::ostream& os) const {
    os << "alpha,beta,mean,std,seeds,complete\n";
    for (std::size_t ia = 0; ia < alphas.size(); ++ia)
      for (std::size_t ib = 0; ib < betas.size(); ++ib) {
        const auto& c = cell(ia, ib);
        os << format_double(alphas[ia]) << ',' << format_double(betas[ib]) << ',' << format_double(c.mean) << ','
           << format_double(c.std) << ',' << c.per_seed.size() << ',' << (c.complete() ? 1 : 0) << '\n';
      }
  }
};

using CellRun = std::function<double(double alpha, double beta, std::uint64_t seed)>;

/// Grid evaluation. The grid must contain (0, 0). A 1x1 grid is accepted
/// and evaluates the same way as `multi_seed`.
inline SweepGrid sweep(const std::vector<double>& alphas, const std::vector<double>& betas, const CellRun& run,
                       const std::vector<std::uint64_t>& seeds) {
  if (alphas.empty() || betas.empty()) throw ConfigError("sweep grids must be nonempty");
  if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
  const bool single = alphas.size() == 1 && betas.size() == 1;
  if (!single && (std::find(alphas.begin(), alphas.end(), 0.0) == alphas.end() ||
                  std::find(betas.begin(), betas.end(), 0.0) == betas.end()))
    throw ConfigError("sweep grid must include alpha = 0 and beta = 0");
  SweepGrid g{alphas, betas, {}};
  for (double a : alphas)
    for (double b : betas) {
      EvalReport r;
      for (auto s : seeds) {
        try {
          r.per_seed.push_back(run(a, b, s));
          r.seeds.push_back(s);
        } catch (const TrainingError&) {
          r.failed.push_back(s);
        }
      }
      r.recompute();
      g.cells.push_back(std::move(r));
    }
  return g;
}

// ---------------------------------------------------------------------------
// Decisions

struct Decision {
  std::size_t best = 0;  ///< candidate index, first step in the high bit
  double predicted = 0.0;
  std::vector<double> predictions;  ///< one per candidate, original scale
};

constexpr std::size_t kMaxDecisionSteps = 20;

/// Predicted terminal outcome of every 2^tau treatment block following the
/// observed prefix `history` (rows of `unit`), with `window_x` holding the
/// covariates of the first tau-1 block rows. Ties go to the smaller index.
inline Decision decide_sequence(const DsivModel& m, const ObservedPanel& history, std::size_t unit,
                                std::span<const double> window_x, std::size_t tau) {
  if (tau > kMaxDecisionSteps)
    throw ContractError("refusing to enumerate 2^" + std::to_string(tau) + " treatment sequences");
  if (tau == 0) throw ContractError("decision window must be positive");
  if (m.mode != TrainMode::decision || m.tau != tau)
    throw ConfigError("model was not trained for " + std::to_string(tau) + "-step decisions");
  if (!(dims_of(history) == m.dims())) throw ConfigError("history dimensions do not match the model");
  if (history.d_a != 1) throw ContractError("decisions need a single binary treatment");
  const std::size_t H = history.T, L = H + tau, dx = history.d_x, nb = std::size_t{1} << tau;
  if (window_x.size() != (tau - 1) * dx) throw DimensionError("window covariates do not cover tau-1 rows");

  ObservedPanel cand;
  cand.n = nb;
  cand.T = L;
  cand.d_x = dx;
  cand.d_a = 1;
  cand.treatment = history.treatment;
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t s = 0; s < H; ++s)
      for (std::size_t k = 0; k < dx; ++k) cand.x.push_back(history.x_at(unit, s, k));
    cand.x.insert(cand.x.end(), window_x.begin(), window_x.end());
    cand.x.insert(cand.x.end(), dx, 0.0);
    for (std::size_t s = 0; s < H; ++s) cand.a.push_back(history.a_at(unit, s));
    const auto seq = sim::candidate_sequence(b, tau);
    cand.a.insert(cand.a.end(), seq.begin(), seq.end());
    for (std::size_t s = 0; s < H; ++s) cand.y.push_back(history.y_at(unit, s));
    cand.y.insert(cand.y.end(), tau, 0.0);
  }
  const auto pred = predict_panel(m, cand, WindowSpec::decision(H, tau), nb);
  Decision d;
  d.predictions.resize(nb);
  for (std::size_t b = 0; b < nb; ++b) d.predictions[b] = pred[b * L + L - 1];
  d.best = static_cast<std::size_t>(std::max_element(d.predictions.begin(), d.predictions.end()) -
                                    d.predictions.begin());
  d.predicted = d.predictions[d.best];
  return d;
}

inline std::vector<Decision> decide_all(const DsivModel& m, const sim::OracleDecisionSet& set) {
  const ObservedPanel hist = observe(set.history_panel);
  const std::size_t w = (set.tau - 1) * hist.d_x;
  std::vector<Decision> out;
  out.reserve(set.n());
  for (std::size_t i = 0; i < set.n(); ++i)
    out.push_back(decide_sequence(m, hist, i, std::span<const double>(set.window_x).subspan(i * w, w), set.tau));
  return out;
}

struct RegretStats {
  std::vector<double> per_unit;
  double min = 0.0, max = 0.0, avg = 0.0, std = 0.0;  ///< std uses n-1

  nlohmann::json to_json() const {
    return {{"min", min}, {"max", max}, {"avg", avg}, {"std", std}, {"units", per_unit.size()}};
  }
};

inline RegretStats regret_stats(std::vector<double> per_unit) {
  RegretStats r;
  r.per_unit = std::move(per_unit);
  if (r.per_unit.empty()) return r;
  r.min = *std::min_element(r.per_unit.begin(), r.per_unit.end());
  r.max = *std::max_element(r.per_unit.begin(), r.per_unit.end());
  r.avg = sample_mean(r.per_unit);
  r.std = sample_std(r.per_unit);
  return r;
}

/// oracle_i minus the true outcome of the chosen candidate.
inline RegretStats oracle_regret(const std::vector<std::size_t>& chosen, const sim::OracleDecisionSet& set) {
  if (chosen.size() != set.n())
    throw ContractError("got " + std::to_string(chosen.size()) + " decisions for " + std::to_string(set.n()) +
                        " units");
  std::vector<double> r;
  r.reserve(chosen.size());
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    if (chosen[i] >= set.candidates())
      throw ContractError("decision " + std::to_string(chosen[i]) + " is not in the oracle table");
    r.push_back(set.oracle[i] - set.outcome(i, chosen[i]));
  }
  return regret_stats(std::move(r));
}

/// Expected regret of choosing uniformly among the candidates, per unit.
inline RegretStats random_policy_regret(const sim::OracleDecisionSet& set) {
  std::vector<double> r;
  for (std::size_t i = 0; i < set.n(); ++i) {
    double s = 0.0;
    for (std::size_t b = 0; b < set.candidates(); ++b) s += set.outcome(i, b);
    r.push_back(set.oracle[i] - s / static_cast<double>(set.candidates()));
  }
  return regret_stats(std::move(r));
}

// ---------------------------------------------------------------------------
// Experiments

/// Everything one seeded run needs.
struct Experiment {
  sim::GenConfig gen;
  ModelConfig model;
  TrainConfig train;
  bool derive_generator_seeds = true;  ///< coefficient and trajectory seeds follow the run seed
};

/// Generator seeds for a run seed, from the "coef" and "data" substreams.
inline sim::GenConfig seeded_generator(const sim::GenConfig& gen, std::uint64_t seed) {
  sim::GenConfig g = gen;
  g.coef_seed = Rng(seed).substream("coef").next_u64();
  g.traj_seed = Rng(seed).substream("data").next_u64();
  return g;
}

inline DsivModel init_model(const ModelConfig& cfg, const DataDims& dims, std::uint64_t seed) {
  return DsivModel(cfg, dims, Rng(seed).substream("init"));
}

struct OneStepResult {
  double test_mse = 0.0;
  TrainReport report;
};

inline OneStepResult run_one_step(const Experiment& e, std::uint64_t seed) {
  const sim::GenConfig g = e.derive_generator_seeds ? seeded_generator(e.gen, seed) : e.gen;
  const sim::Splits d = sim::generate_splits(g);
  const ObservedPanel train = observe(d.train), val = observe(d.val), test = observe(d.test);
  DsivModel m = init_model(e.model, dims_of(train), seed);
  TrainConfig tc = e.train;
  tc.seed = seed;
  tc.mode = TrainMode::one_step;
  OneStepResult r;
  r.report = fit(m, train, val, tc);
  r.test_mse = evaluate_one_step(m, test);
  return r;
}

struct DecisionResult {
  RegretStats model, random;
  std::vector<Decision> decisions;
  TrainReport report;
};

inline DecisionResult run_decision(const Experiment& e, std::uint64_t seed) {
  const sim::GenConfig g = e.derive_generator_seeds ? seeded_generator(e.gen, seed) : e.gen;
  const sim::DecisionData d = sim::generate_decision_dataset(g);
  const ObservedPanel train = observe(d.train), val = observe(d.val);
  DsivModel m = init_model(e.model, dims_of(train), seed);
  TrainConfig tc = e.train;
  tc.seed = seed;
  tc.mode = TrainMode::decision;
  tc.tau = g.tau;
  DecisionResult r;
  r.report = fit(m, train, val, tc);
  r.decisions = decide_all(m, d.test);
  std::vector<std::size_t> chosen;
  for (const auto& dec : r.decisions) chosen.push_back(dec.best);
  r.model = oracle_regret(chosen, d.test);
  r.random = random_policy_regret(d.test);
  return r;
}

}  // namespace dsiv::bench
