#pragma once

// Run configuration: one JSON document with generator, model, training and
// evaluation sections. Unknown keys are rejected at every level.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsiv/bench.hpp"
#include "dsiv/cfr.hpp"
#include "dsiv/errors.hpp"
#include "dsiv/json_util.hpp"
#include "dsiv/simgen.hpp"

namespace dsiv {

struct EvalConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<double> alphas{0.0, 0.01, 0.1, 1.0};
  std::vector<double> betas{0.0, 0.01, 0.1, 1.0};
  std::size_t tau = 5;
};

enum class Verbosity { quiet, info, debug };

struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";
  Verbosity verbosity = Verbosity::info;
  sim::GenConfig generator;
  /// Absent seeds are derived from `seed`.
  std::optional<std::uint64_t> coef_seed, traj_seed;
  ModelConfig model;
  TrainConfig training;
  EvalConfig evaluation;

  /// Generator with seeds and tau resolved for run seed `s`.
  sim::GenConfig generator_for(std::uint64_t s) const {
    sim::GenConfig g = bench::seeded_generator(generator, s);
    if (coef_seed) g.coef_seed = *coef_seed;
    if (traj_seed) g.traj_seed = *traj_seed;
    g.tau = evaluation.tau;
    return g;
  }

  bool decision_mode() const { return generator.kind == sim::GeneratorKind::decision; }

  /// Training section with the run seed and the mode implied by the generator.
  TrainConfig training_for(std::uint64_t s) const {
    TrainConfig t = training;
    t.seed = s;
    t.mode = decision_mode() ? TrainMode::decision : TrainMode::one_step;
    t.tau = evaluation.tau;
    return t;
  }

  bench::Experiment experiment() const {
    bench::Experiment e;
    e.gen = generator;
    e.gen.tau = evaluation.tau;
    e.model = model;
    e.train = training;
    e.derive_generator_seeds = !coef_seed && !traj_seed;
    if (!e.derive_generator_seeds) e.gen = generator_for(seed);
    return e;
  }
};

inline const char* to_string(Verbosity v) {
  return v == Verbosity::quiet ? "quiet" : v == Verbosity::info ? "info" : "debug";
}

namespace detail {

template <class E>
E parse_enum(const std::string& value, const std::string& key, std::initializer_list<std::pair<const char*, E>> opts) {
  std::string names;
  for (const auto& [name, e] : opts) {
    if (value == name) return e;
    names += names.empty() ? name : std::string(", ") + name;
  }
  throw ConfigError(key + " must be one of " + names + ", got " + value);
}

inline sim::GenConfig generator_from_json(const nlohmann::json& j, std::optional<std::uint64_t>& coef_seed,
                                          std::optional<std::uint64_t>& traj_seed) {
  std::string kind = "one-step";
  if (j.contains("kind")) {
    if (!j.at("kind").is_string()) throw ConfigError("generator.kind must be a string");
    kind = j.at("kind").get<std::string>();
  }
  using sim::GeneratorKind;
  sim::GenConfig g = parse_enum<GeneratorKind>(kind, "generator.kind",
                                               {{"one-step", GeneratorKind::one_step},
                                                {"decision", GeneratorKind::decision}}) == GeneratorKind::one_step
                         ? sim::GenConfig::one_step()
                         : sim::GenConfig::decision();
  StrictObject o(j, "generator");
  std::string ignored;
  o.read("kind", ignored);
  o.read("d_z", g.d_z);
  o.read("d_c", g.d_c);
  o.read("d_u", g.d_u);
  o.read("T", g.T);
  o.read("n_train", g.n_train);
  o.read("n_val", g.n_val);
  o.read("n_test", g.n_test);
  if (o.has("coef_seed")) {
    std::uint64_t v = 0;
    o.read("coef_seed", v);
    coef_seed = v;
  }
  if (o.has("traj_seed")) {
    std::uint64_t v = 0;
    o.read("traj_seed", v);
    traj_seed = v;
  }
  std::string mixing = to_string(g.mixing), policy = to_string(g.test_policy),
              summary = to_string(g.confounder_summary);
  o.read("mixing", mixing);
  o.read("test_policy", policy);
  o.read("confounder_summary", summary);
  g.mixing = parse_enum<sim::MixingMode>(
      mixing, "generator.mixing",
      {{"concat", sim::MixingMode::concat}, {"orthogonal-mix", sim::MixingMode::orthogonal_mix}});
  g.test_policy = parse_enum<sim::TreatmentPolicy>(
      policy, "generator.test_policy",
      {{"random", sim::TreatmentPolicy::random}, {"observational", sim::TreatmentPolicy::observational}});
  g.confounder_summary = parse_enum<sim::ConfounderSummary>(
      summary, "generator.confounder_summary",
      {{"current", sim::ConfounderSummary::current}, {"discounted", sim::ConfounderSummary::discounted}});
  o.read("discount", g.discount);
  o.read("latent_high", g.latent_high);
  o.read("history", g.history);
  o.finish();
  return g;
}

}  // namespace detail

inline nlohmann::json generator_json(const RunConfig& c) {
  nlohmann::json g = sim::to_json(c.generator);
  g.erase("tau");
  g.erase("coef_seed");
  g.erase("traj_seed");
  if (c.coef_seed) g["coef_seed"] = *c.coef_seed;
  if (c.traj_seed) g["traj_seed"] = *c.traj_seed;
  return g;
}

/// Fully resolved document; parsing it yields the same configuration.
inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json t = to_json(c.training);
  t.erase("mode");
  t.erase("tau");
  return {{"seed", c.seed},
          {"output_dir", c.output_dir},
          {"verbosity", to_string(c.verbosity)},
          {"generator", generator_json(c)},
          {"model", to_json(c.model)},
          {"training", t},
          {"evaluation",
           {{"seeds", c.evaluation.seeds},
            {"alphas", c.evaluation.alphas},
            {"betas", c.evaluation.betas},
            {"tau", c.evaluation.tau}}}};
}

/// Identifies what a run computes: the resolved document minus where it is
/// written and how loudly.
inline std::string config_fingerprint(const RunConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("output_dir");
  j.erase("verbosity");
  return bench::fingerprint(j);
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  StrictObject o(j, "config");
  o.read("seed", c.seed);
  o.read("output_dir", c.output_dir);
  std::string verb = to_string(c.verbosity);
  o.read("verbosity", verb);
  c.verbosity = detail::parse_enum<Verbosity>(
      verb, "verbosity", {{"quiet", Verbosity::quiet}, {"info", Verbosity::info}, {"debug", Verbosity::debug}});
  if (auto* g = o.child("generator")) c.generator = detail::generator_from_json(*g, c.coef_seed, c.traj_seed);
  if (auto* m = o.child("model")) c.model = model_config_from_json(*m);
  if (auto* t = o.child("training")) {
    if (t->contains("mode") || t->contains("tau"))
      throw ConfigError("training.mode and training.tau are implied by the generator and evaluation sections");
    c.training = train_config_from_json(*t);
  }
  if (auto* e = o.child("evaluation")) {
    StrictObject eo(*e, "evaluation");
    eo.read("seeds", c.evaluation.seeds);
    eo.read("alphas", c.evaluation.alphas);
    eo.read("betas", c.evaluation.betas);
    eo.read("tau", c.evaluation.tau);
    eo.finish();
  }
  o.finish();
  if (c.evaluation.tau == 0 || c.evaluation.tau > bench::kMaxDecisionSteps)
    throw ConfigError("evaluation.tau must be in [1,20]");
  if (c.evaluation.seeds.empty()) throw ConfigError("evaluation.seeds must be nonempty");
  for (double a : c.evaluation.alphas)
    if (a < 0.0) throw ConfigError("evaluation.alphas must be non-negative");
  for (double b : c.evaluation.betas)
    if (b < 0.0) throw ConfigError("evaluation.betas must be non-negative");
  c.generator.tau = c.evaluation.tau;
  c.generator.validate();
  c.model.validate();
  c.training.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace dsiv
