// dsiv: generate panels, train, evaluate, sweep alpha/beta, decide treatment blocks.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dsiv/dsiv.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kConfig = 1, kData = 2, kDiverged = 3, kIo = 4 };

struct Options {
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> checkpoints;
  bool quiet = false;
};

struct Run {
  dsiv::RunConfig cfg;
  fs::path out;

  bool info() const { return cfg.verbosity != dsiv::Verbosity::quiet; }
  bool debug() const { return cfg.verbosity == dsiv::Verbosity::debug; }
};

Run resolve(const Options& o) {
  Run r;
  r.cfg = o.config.empty() ? dsiv::run_config_from_json(json::object()) : dsiv::load_run_config(o.config);
  if (o.seed) r.cfg.seed = *o.seed;
  if (!o.out.empty()) r.cfg.output_dir = o.out;
  if (o.quiet) r.cfg.verbosity = dsiv::Verbosity::quiet;
  r.out = r.cfg.output_dir;
  return r;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw dsiv::IoError("cannot write " + path.string());
  os << text;
  if (!os) throw dsiv::IoError("write failed for " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void prepare_out(const Run& r) {
  std::error_code ec;
  fs::create_directories(r.out, ec);
  if (ec || !fs::is_directory(r.out)) throw dsiv::IoError("cannot create output directory " + r.out.string());
  write_json(r.out / "resolved_config.json", dsiv::to_json(r.cfg));
}

fs::path data_dir(const Options& o) {
  if (o.data.empty()) throw dsiv::ConfigError("--data is required");
  return o.data;
}

void check_data_dims(const dsiv::RunConfig& cfg, const dsiv::PanelDataset& ds, const std::string& name) {
  if (ds.d_x != cfg.generator.d_x())
    throw dsiv::ConfigError(name + " has " + std::to_string(ds.d_x) + " covariates but the config expects " +
                            std::to_string(cfg.generator.d_x()));
}

json checkpoint_with_seed(const dsiv::DsivModel& m, std::uint64_t seed) {
  json j = dsiv::checkpoint_json(m);
  j["seed"] = seed;
  return j;
}

int cmd_gen(const Options& o) {
  const Run r = resolve(o);
  const auto g = r.cfg.generator_for(r.cfg.seed);
  prepare_out(r);
  json meta = {{"generator", dsiv::sim::to_json(g)}, {"seed", r.cfg.seed}};
  if (g.kind == dsiv::sim::GeneratorKind::one_step) {
    const auto d = dsiv::sim::generate_splits(g);
    dsiv::save_panel(d.train, r.out / "train.csv", true);
    dsiv::save_panel(d.val, r.out / "val.csv", true);
    dsiv::save_panel(d.test, r.out / "test.csv", true);
    meta["train"] = dsiv::panel_metadata(d.train);
    meta["val"] = dsiv::panel_metadata(d.val);
    meta["test"] = dsiv::panel_metadata(d.test);
  } else {
    const auto d = dsiv::sim::generate_decision_dataset(g);
    dsiv::save_panel(d.train, r.out / "train.csv", true);
    dsiv::save_panel(d.val, r.out / "val.csv", true);
    dsiv::sim::save_oracle_set(d.test, r.out, "test", true);
    meta["train"] = dsiv::panel_metadata(d.train);
    meta["val"] = dsiv::panel_metadata(d.val);
    meta["test_history"] = dsiv::panel_metadata(d.test.history_panel);
    meta["candidates"] = d.test.candidates();
  }
  write_json(r.out / "metadata.json", meta);
  if (r.info()) {
    for (const char* split : {"train", "val", "test", "test_history"}) {
      if (!meta.contains(split)) continue;
      const auto& m = meta[split];
      std::printf("%-12s n=%zu T=%zu d_x=%zu treatment_rate=%.4f\n", split, m["n"].get<std::size_t>(),
                  m["T"].get<std::size_t>(), m["d_x"].get<std::size_t>(), m["treatment_rate"].get<double>());
    }
  }
  return kOk;
}

int cmd_train(const Options& o) {
  const Run r = resolve(o);
  const fs::path dir = data_dir(o);
  const auto train_ds = dsiv::load_panel(dir / "train.csv");
  const auto val_ds = dsiv::load_panel(dir / "val.csv");
  check_data_dims(r.cfg, train_ds, "train.csv");
  check_data_dims(r.cfg, val_ds, "val.csv");
  const auto train = dsiv::observe(train_ds), val = dsiv::observe(val_ds);
  const auto tc = r.cfg.training_for(r.cfg.seed);
  dsiv::DsivModel m = dsiv::bench::init_model(r.cfg.model, dsiv::dims_of(train), r.cfg.seed);
  prepare_out(r);
  const bool debug = r.debug();
  const auto report = dsiv::fit(m, train, val, tc, [debug](const dsiv::IterationRecord& rec) {
    if (debug)
      std::fprintf(stderr, "iter %zu mse %.5f mi %.5f adv %.5f val %.5f\n", rec.iteration, rec.mse, rec.mi, rec.adv,
                   rec.val_mse);
  });
  write_text(r.out / "checkpoint.json", checkpoint_with_seed(m, r.cfg.seed).dump() + "\n");
  std::ostringstream trace;
  report.write_text(trace);
  write_text(r.out / "train_report.txt", trace.str());
  write_json(r.out / "train_summary.json", report.summary());
  if (r.info())
    std::printf("trained %zu iterations, best iteration %zu, validation MSE %.6f\n", report.trace.size(),
                report.best_iteration, report.best_val_mse);
  return kOk;
}

std::pair<dsiv::DsivModel, std::uint64_t> load_model(const std::string& path, const dsiv::RunConfig& cfg) {
  std::ifstream is(path);
  if (!is) throw dsiv::IoError("cannot open checkpoint " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw dsiv::ConfigError("checkpoint " + path + " is not valid JSON: " + e.what());
  }
  auto m = dsiv::model_from_checkpoint(j);
  if (dsiv::to_json(m.config()) != dsiv::to_json(cfg.model))
    throw dsiv::ConfigError("checkpoint " + path + " architecture does not match the config model section");
  const std::uint64_t seed = j.contains("seed") ? j.at("seed").get<std::uint64_t>() : cfg.seed;
  return {std::move(m), seed};
}

int cmd_eval(const Options& o) {
  const Run r = resolve(o);
  if (o.checkpoints.empty()) throw dsiv::ConfigError("--checkpoint is required");
  const auto test_ds = dsiv::load_panel(data_dir(o) / "test.csv");
  check_data_dims(r.cfg, test_ds, "test.csv");
  const auto test = dsiv::observe(test_ds);
  dsiv::bench::EvalReport rep;
  for (const auto& path : o.checkpoints) {
    auto [m, seed] = load_model(path, r.cfg);
    rep.seeds.push_back(seed);
    rep.per_seed.push_back(dsiv::bench::evaluate_one_step(m, test));
  }
  rep.fingerprint = dsiv::config_fingerprint(r.cfg);
  rep.recompute();
  prepare_out(r);
  write_json(r.out / "eval_report.json", rep.to_json());
  std::printf("%s\n", rep.summary_line().c_str());
  return kOk;
}

int cmd_sweep(const Options& o) {
  const Run r = resolve(o);
  if (r.cfg.decision_mode()) throw dsiv::ConfigError("sweep runs on the one-step generator");
  prepare_out(r);
  const auto e = r.cfg.experiment();
  const bool info = r.info();
  const auto grid = dsiv::bench::sweep(
      r.cfg.evaluation.alphas, r.cfg.evaluation.betas,
      [&](double a, double b, std::uint64_t seed) {
        auto cell = e;
        cell.train.alpha = a;
        cell.train.beta = b;
        const double mse = dsiv::bench::run_one_step(cell, seed).test_mse;
        if (info) std::fprintf(stderr, "alpha=%g beta=%g seed=%llu mse=%.6f\n", a, b, (unsigned long long)seed, mse);
        return mse;
      },
      r.cfg.evaluation.seeds);
  std::ostringstream csv;
  grid.write_csv(csv);
  write_text(r.out / "sweep.csv", csv.str());
  json cells = json::array();
  for (std::size_t ia = 0; ia < grid.alphas.size(); ++ia)
    for (std::size_t ib = 0; ib < grid.betas.size(); ++ib) {
      json c = grid.cell(ia, ib).to_json();
      c["alpha"] = grid.alphas[ia];
      c["beta"] = grid.betas[ib];
      cells.push_back(c);
    }
  const auto [ba, bb] = grid.argmin();
  write_json(r.out / "sweep.json", {{"cells", cells}, {"best", {{"alpha", grid.alphas[ba]}, {"beta", grid.betas[bb]}}}});
  if (info) {
    std::printf("%s", csv.str().c_str());
    std::printf("best cell alpha=%g beta=%g\n", grid.alphas[ba], grid.betas[bb]);
  }
  return kOk;
}

int cmd_decide(const Options& o) {
  const Run r = resolve(o);
  if (o.checkpoints.size() != 1) throw dsiv::ConfigError("decide needs exactly one --checkpoint");
  const auto set = dsiv::sim::load_oracle_set(data_dir(o), "test");
  check_data_dims(r.cfg, set.history_panel, "test_history.csv");
  auto [m, seed] = load_model(o.checkpoints.front(), r.cfg);
  (void)seed;
  const auto decisions = dsiv::bench::decide_all(m, set);
  std::vector<std::size_t> chosen;
  for (const auto& d : decisions) chosen.push_back(d.best);
  const auto regret = dsiv::bench::oracle_regret(chosen, set);
  const auto random = dsiv::bench::random_policy_regret(set);
  prepare_out(r);
  std::ostringstream csv;
  csv << "unit,sequence,predicted,achieved,oracle,regret\n";
  for (std::size_t i = 0; i < decisions.size(); ++i)
    csv << i << ',' << dsiv::sim::candidate_label(chosen[i], set.tau) << ','
        << dsiv::format_double(decisions[i].predicted) << ',' << dsiv::format_double(set.outcome(i, chosen[i])) << ','
        << dsiv::format_double(set.oracle[i]) << ',' << dsiv::format_double(regret.per_unit[i]) << '\n';
  write_text(r.out / "decisions.csv", csv.str());
  write_json(r.out / "regret.json",
             {{"model", regret.to_json()}, {"random_policy", random.to_json()}, {"candidates", set.candidates()}});
  if (r.info())
    std::printf("regret avg %.4f std %.4f min %.4f max %.4f (random policy avg %.4f) over %zu units\n", regret.avg,
                regret.std, regret.min, regret.max, random.avg, regret.per_unit.size());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequential treatment-effect estimation with decomposed instruments"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "run configuration (JSON)");
    sub->add_option("--out", o.out, "output directory (overrides output_dir)");
    sub->add_option("--seed", o.seed, "run seed (overrides seed)");
    sub->add_flag("--quiet", o.quiet, "suppress progress output");
  };
  auto* gen = app.add_subcommand("gen", "generate train/val/test panels");
  add_common(gen);
  auto* train = app.add_subcommand("train", "fit a model on <data>/train.csv and <data>/val.csv");
  add_common(train);
  train->add_option("--data", o.data, "directory written by gen")->required();
  auto* eval = app.add_subcommand("eval", "one-step counterfactual MSE of checkpoints on <data>/test.csv");
  add_common(eval);
  eval->add_option("--data", o.data, "directory written by gen")->required();
  eval->add_option("--checkpoint", o.checkpoints, "checkpoint file; repeat for several seeds")->required();
  auto* sweep = app.add_subcommand("sweep", "alpha/beta grid over the evaluation seeds");
  add_common(sweep);
  auto* decide = app.add_subcommand("decide", "choose treatment blocks for <data>/test_* and score them");
  add_common(decide);
  decide->add_option("--data", o.data, "directory written by gen")->required();
  decide->add_option("--checkpoint", o.checkpoints, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_gen(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*sweep) return cmd_sweep(o);
    if (*decide) return cmd_decide(o);
  } catch (const dsiv::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const dsiv::IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kIo;
  } catch (const dsiv::TrainingError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kDiverged;
  } catch (const dsiv::NumericDomainError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kDiverged;
  } catch (const dsiv::Error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  }
  return kConfig;
}
