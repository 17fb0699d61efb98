// Acceptance gates. Usage: acceptance <1..7>. Prints one PASS/FAIL line.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "dsiv/dsiv.hpp"
#include "dsiv/grad_check.hpp"
#include "test_util.hpp"

using namespace dsiv;
using dsiv::testing::away_from_zero;
using dsiv::testing::project;
using dsiv::testing::random_param;
using dsiv::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      notes.push_back("failed: " + what);
    }
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.encoder = {.model_dim = 8, .num_heads = 2, .num_layers = 1, .ff_dim = 8, .dropout = 0.0};
  m.outcome = m.encoder;
  m.d_z = 3;
  m.d_c = 4;
  m.repr_hidden = m.head_hidden = m.bridge_hidden = 6;
  return m;
}

ObservedPanel linear_panel(std::size_t n, std::size_t T, std::uint64_t seed) {
  Rng rng(seed);
  ObservedPanel p;
  p.n = n;
  p.T = T;
  p.d_x = 3;
  for (std::size_t i = 0; i < n * T; ++i) {
    double y = 0.0;
    for (double w : {1.0, -0.5, 0.25}) {
      const double x = rng.uniform(-1.0, 1.0);
      p.x.push_back(x);
      y += w * x;
    }
    const double a = rng.uniform() < 0.5 ? 1.0 : 0.0;
    p.a.push_back(a);
    p.y.push_back(y + 0.5 * a + 0.05 * rng.normal());
  }
  return p;
}

// ---- 1: gradients

void criterion_1(Verdict& v) {
  double worst = 0.0;
  std::size_t checks = 0;
  auto check = [&](const std::string& name, const std::function<Tensor()>& f, std::vector<Tensor> ps) {
    const auto r = grad_check(f, std::move(ps), 1e-5, 1e-4);
    worst = std::max(worst, r.worst());
    ++checks;
    v.require(r.pass, name + fmt(" (rel err %.2e)", r.worst()));
  };
  Rng rng(2024);
  Tensor x = away_from_zero({4, 3}, rng), pos = random_param({4, 3}, rng, 0.5, 2.0);
  for (auto op : {UnaryOp::neg, UnaryOp::relu, UnaryOp::exp, UnaryOp::sin, UnaryOp::cos, UnaryOp::square,
                  UnaryOp::sigmoid, UnaryOp::tanh})
    check(fmt("unary %d", int(op)), [&] { return project(elementwise(op, x)); }, {x});
  check("log", [&] { return project(log(pos)); }, {pos});
  check("log_sigmoid", [&] { return project(log_sigmoid(x * 3.0)); }, {x});
  check("clamp", [&] { return project(clamp(x, -0.5, 0.5)); }, {x});
  Tensor b = random_param({3}, rng, 0.5, 1.5), c = random_param({4, 1}, rng, 0.5, 1.5);
  for (auto op : {BinaryOp::add, BinaryOp::sub, BinaryOp::mul, BinaryOp::div}) {
    check(fmt("binary %d row", int(op)), [&] { return project(elementwise(op, x, b)); }, {x, b});
    check(fmt("binary %d col", int(op)), [&] { return project(elementwise(op, x, c)); }, {x, c});
  }
  Tensor a3 = random_param({4, 3, 5}, rng), w = random_param({5, 2}, rng), b3 = random_param({4, 5, 3}, rng);
  check("matmul", [&] { return project(matmul(a3, w)); }, {a3, w});
  check("batched matmul", [&] { return project(matmul(a3, b3)); }, {a3, b3});
  check("transpose", [&] { return project(transpose(a3)); }, {a3});
  check("reshape", [&] { return project(reshape(a3, {12, 5})); }, {a3});
  check("concat", [&] { return project(concat({a3, a3 * 2.0}, 1)); }, {a3});
  check("slice", [&] { return project(slice(a3, -1, 1, 3)); }, {a3});
  for (long axis : {0L, 1L, 2L}) {
    check("sum", [&] { return project(sum(a3, axis)); }, {a3});
    check("mean", [&] { return project(mean(a3, axis)); }, {a3});
    check("max", [&] { return project(max(a3, axis)); }, {a3});
  }
  check("softmax", [&] { return project(softmax(a3, 1)); }, {a3});
  Tensor sq = random_param({4, 3, 3}, rng);
  check("masked softmax", [&] { return project(softmax(causal_mask(sq), -1)); }, {sq});
  Tensor g = random_param({5}, rng, 0.5, 1.5), bias = random_param({5}, rng);
  check("layer_norm", [&] { return project(layer_norm(a3, g, bias)); }, {a3, g, bias});
  check("cumulative_mean", [&] { return project(cumulative_mean(a3)); }, {a3});
  check("shift_right", [&] { return project(shift_right(a3)); }, {a3});
  check("dropout", [&] {
    Rng r(5);
    return project(dropout(a3, 0.3, true, r));
  }, {a3});

  nn::EncoderConfig ec{.input_dim = 3, .model_dim = 8, .num_heads = 2, .num_layers = 2, .ff_dim = 8, .dropout = 0.0};
  nn::TransformerEncoder enc(ec, rng);
  Tensor seq = random_param({4, 3, 3}, rng);
  nn::ParamList eps;
  enc.collect("enc", eps);
  std::vector<Tensor> et{seq}, key_bias;
  for (const auto& p : eps) (p.name.ends_with(".key.bias") ? key_bias : et).push_back(p.tensor);
  check("encoder", [&] { return project(enc(seq, {})); }, et);
  project(enc(seq, {})).backward();
  double kb = 0.0;
  for (const auto& t : key_bias)
    for (double gr : t.grad()) kb = std::max(kb, std::abs(gr));
  v.require(kb < 1e-12, fmt("key-bias gradient is zero (%.1e)", kb));
  nn::Mlp mlp({3, 5, 2}, rng);
  nn::ParamList mp;
  mlp.collect("m", mp);
  Tensor in = random_param({4, 3}, rng);
  check("mlp", [&] { return project(mlp(in)); }, [&] {
    std::vector<Tensor> t;
    for (const auto& p : mp) t.push_back(p.tensor);
    return t;
  }());

  // Composed losses on n = 4, T = 3.
  const ObservedPanel tr = linear_panel(4, 3, 3);
  const DsivModel m(tiny_model(), dims_of(tr), rng);
  const TrainBatch tb = make_batch(tr, {0, 1, 2, 3}, Standardizer::fit(tr.y), WindowSpec::one_step(3));
  const Decomposer& dec = m.decomposer();
  nn::ParamList rep, var;
  dec.collect_representation(rep);
  dec.collect_variational(var);
  std::vector<Tensor> rep_t, var_t, main_t, bridge_t;
  for (const auto& p : rep)
    if (!p.name.ends_with(".key.bias")) rep_t.push_back(p.tensor);
  for (const auto& p : var) var_t.push_back(p.tensor);
  for (const auto& p : m.main_params())
    if (!p.name.ends_with(".key.bias")) main_t.push_back(p.tensor);
  for (const auto& p : m.bridge_params()) bridge_t.push_back(p.tensor);
  const auto weights = exclusion_weights(dec, dec.decompose(tb.seq.inputs, {}), tb.seq);
  check("mi loss", [&] { return mi_terms(dec, dec.decompose(tb.seq.inputs, {}), tb.seq, weights).total(); }, rep_t);
  check("head likelihood loss", [&] { return lld_total_loss(dec, dec.decompose(tb.seq.inputs, {}), tb.seq); }, var_t);
  auto pred = [&] {
    const auto r = dec.decompose(tb.seq.inputs, {});
    return predict_outcomes(m, tb.seq.a, r.c_rep, {});
  };
  check("mse loss", [&] { return mse_loss(pred(), tb.target); }, main_t);
  Tensor M, bin, resid;
  {
    NoGradGuard ng;
    const auto r = dec.decompose(tb.seq.inputs, {});
    M = slice(bridge_weights(m.bridge(), tb.seq.a, r.c_rep, r.z_rep), 1, 1, 3);
    bin = BridgeNet::inputs(tb.seq.a, r.c_rep, r.z_rep);
    resid = slice(pred() - tb.target, 1, 1, 3);
  }
  check("adversarial h-view",
        [&] { return adversarial_loss(M, slice(pred() - tb.target, 1, 1, 3), 0.25).h_view; }, main_t);
  check("adversarial f-view", [&] { return adversarial_loss(slice(m.bridge()(bin), 1, 1, 3), resid, 0.25).f_view; },
        bridge_t);
  v.note(fmt("%zu checks, worst relative error %.2e", checks, worst));
}

// ---- 2: CLUB identities

void criterion_2(Verdict& v) {
  Rng rng(7);
  for (auto kind : {TargetKind::gaussian, TargetKind::bernoulli}) {
    VariationalHead head(kind, 3, 2, 5, rng);
    const Tensor cond = random_tensor({1, 3}, rng);
    const Tensor t = kind == TargetKind::gaussian ? random_tensor({1, 2}, rng) : Tensor({1, 2}, {1.0, 0.0});
    for (auto dir : {MiDirection::minimize, MiDirection::maximize})
      v.require(club_loss(head, cond, t, dir).item() == 0.0, "club_loss is exactly 0 for n = 1");
  }

  double blind = 0.0;
  for (auto kind : {TargetKind::gaussian, TargetKind::bernoulli}) {
    VariationalHead head(kind, 3, 2, 5, rng);
    nn::ParamList ps;
    head.collect("h", ps);
    for (auto& p : ps)
      if (p.name.ends_with("layer0.weight"))
        for (auto& x : p.tensor.mutable_data()) x = 0.0;
    for (std::size_t n : {2u, 5u, 16u, 64u}) {
      const Tensor cond = random_tensor({n, 3}, rng, -3.0, 3.0);
      std::vector<double> t(2 * n);
      for (auto& x : t) x = kind == TargetKind::gaussian ? 2.0 * rng.normal() : (rng.uniform() < 0.5 ? 1.0 : 0.0);
      for (auto dir : {MiDirection::minimize, MiDirection::maximize})
        blind = std::max(blind, std::abs(club_loss(head, cond, Tensor({n, 2}, t), dir).item()));
    }
  }
  v.require(blind <= 1e-8, fmt("condition-blind club_loss <= 1e-8 (%.1e)", blind));

  double row_err = 0.0;
  for (std::size_t n : {1u, 2u, 7u, 50u}) {
    const Tensor feats = random_tensor({n, 5}, rng, -3.0, 3.0);
    for (double sigma : {0.1, 1.0, 10.0}) {
      const auto pw = rbf_pair_weights(feats, sigma);
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += pw.w.at({i, j});
        row_err = std::max(row_err, std::abs(s - 1.0));
      }
    }
  }
  v.require(row_err <= 1e-12, fmt("pair-weight rows sum to 1 (%.1e)", row_err));

  const auto ex = rbf_pair_weights(Tensor({2, 2}, {0.0, 0.0, 1.0, 1.0}), 1.0);
  const double w0 = ex.w.at({0, 0}), w1 = ex.w.at({0, 1});
  v.require(std::abs(w0 - 0.6529) <= 1e-4 && std::abs(w1 - 0.3471) <= 1e-4,
            fmt("n = 2 example [%.6f, %.6f] vs [0.6529, 0.3471]", w0, w1));
  v.note(fmt("blind %.1e, row error %.1e, example [%.4f, %.4f]", blind, row_err, w0, w1));
}

// ---- 3: generator

struct BruteState {
  std::vector<double> z, c, u, u_lag;
  double a = 0.0, y = 0.0;
  std::vector<double> lags = std::vector<double>(5, 0.0);
};

// Straight-line roll-forward of one decision unit under a forced treatment block.
double brute_terminal(const sim::GenConfig& g, const sim::Coefficients& k, Rng rng, const std::vector<int>& forced) {
  const double hi = g.latent_high;
  BruteState st;
  for (std::size_t i = 0; i < g.d_z; ++i) st.z.push_back(rng.uniform(0.0, hi));
  for (std::size_t i = 0; i < g.d_c; ++i) st.c.push_back(rng.uniform(0.0, hi));
  for (std::size_t i = 0; i < g.d_u; ++i) st.u.push_back(rng.normal());
  st.u_lag.assign(g.d_u, 0.0);
  for (std::size_t t = 0; t < g.history + g.tau; ++t) {
    double act;
    if (t < g.history) {
      double logit = -0.5 * st.a + 0.2 * st.y - 0.1 * std::sin(double(t));
      std::size_t j = 0;
      for (double x : st.z) logit += k.coef_a[j++] * x - std::cos(x * x);
      for (double x : st.c) logit += k.coef_a[j++] * x - std::cos(x * x);
      for (double x : st.u) logit += k.coef_a[j++] * x - std::cos(x * x);
      act = (1.0 / (1.0 + std::exp(-logit)) >= 0.5) ? 1.0 : 0.0;
    } else {
      act = forced[t - g.history];
    }
    st.lags.insert(st.lags.begin(), act);
    st.lags.pop_back();
    double lin = 0.0, seq = 0.0;
    std::size_t j = 0;
    for (double x : st.c) lin += k.coef_y[j++] * x;
    for (double x : st.u) lin += k.coef_y[j++] * x;
    for (double x : st.u_lag) lin += k.coef_y[j++] * x;
    for (int l = 0; l < 5; ++l) seq += k.coef_seq[l] * st.lags[l];
    const double y = 0.2 * lin - 0.5 * seq + std::sin(double(t));
    st.u_lag = st.u;
    for (auto& x : st.z) x = 0.4 * x + 0.6 * rng.uniform(0.0, hi) + 0.3 * std::sin(double(t));
    for (auto& x : st.c) x = 0.3 * x + 0.7 * rng.uniform(0.0, hi) + 0.2 * std::sin(double(t));
    for (auto& x : st.u) x = rng.normal() - 0.1 * std::cos(double(t));
    st.a = act;
    st.y = y;
  }
  return st.y;
}

std::string csv_text(const PanelDataset& ds) {
  std::ostringstream os;
  write_panel_csv(os, ds, true);
  return os.str();
}

void criterion_3(Verdict& v) {
  sim::GenConfig g = sim::GenConfig::one_step();
  v.require(g.d_x() == 10 && g.T == 100, "default dims d_x = 10, T = 100");
  g.n_train = 50;
  g.n_val = g.n_test = 20;
  const auto a = sim::generate_splits(g), b = sim::generate_splits(g);
  const auto ds = a.train;
  v.require(ds.n == 50 && ds.T == 100 && ds.d_x == 10 && ds.x.size() == 50 * 100 * 10, "train panel shape");
  const std::string ca = csv_text(a.train) + csv_text(a.val) + csv_text(a.test);
  const std::string cb = csv_text(b.train) + csv_text(b.val) + csv_text(b.test);
  v.require(bench::fingerprint(nlohmann::json(ca)) == bench::fingerprint(nlohmann::json(cb)) && ca == cb,
            "seeded regeneration is checksum-identical");

  sim::GenConfig mc = sim::GenConfig::one_step();
  mc.T = 4;
  mc.n_train = 100000;
  const auto big = sim::generate_simulation(mc, 11, mc.n_train, sim::TreatmentPolicy::random);
  const auto& L = *big.latent;
  double drift_err = 0.0;
  for (std::size_t s = 1; s < mc.T; ++s)
    for (std::size_t k = 0; k < 3; ++k) {
      double mz = 0.0, mcv = 0.0, mu = 0.0;
      for (std::size_t i = 0; i < big.n; ++i) {
        const std::size_t r = i * mc.T + s, p = r - 1;
        mz += L.z[r * mc.d_z + k] - 0.4 * L.z[p * mc.d_z + k];
        mcv += L.c[r * mc.d_c + k] - 0.3 * L.c[p * mc.d_c + k];
        mu += L.u[r * mc.d_u + k];
      }
      const double n = double(big.n), st = std::sin(double(s)), ct = std::cos(double(s));
      drift_err = std::max({drift_err, std::abs(mz / n - (0.3 + 0.3 * st)), std::abs(mcv / n - (0.35 + 0.2 * st)),
                            std::abs(mu / n + 0.1 * ct)});
    }
  v.require(drift_err <= 0.01, fmt("Monte-Carlo drift means within 0.01 (%.4f)", drift_err));

  const sim::GenConfig c = sim::GenConfig::decision();
  const auto set = sim::generate_oracle_set(c, c.traj_seed, c.n_test);
  const auto coef = sim::draw_coefficients(c);
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < set.n(); ++i) {
    double best = -INFINITY;
    std::size_t arg = 0;
    for (std::size_t bi = 0; bi < 32; ++bi) {
      std::vector<int> seq(5);
      for (int k = 0; k < 5; ++k) seq[k] = (bi >> (4 - k)) & 1;
      const double y = brute_terminal(c, coef, sim::unit_stream(c.traj_seed, "test", i), seq);
      mismatches += y != set.outcome(i, bi);
      if (y > best) {
        best = y;
        arg = bi;
      }
    }
    mismatches += set.oracle[i] != best || set.best[i] != arg;
  }
  v.require(set.n() == 100 && set.candidates() == 32, "100 test units with 32 candidates");
  v.require(mismatches == 0, fmt("oracle tables equal brute-force roll-forward (%zu mismatches)", mismatches));
  v.note(fmt("drift error %.4f, oracle mismatches %zu", drift_err, mismatches));
}

// ---- 4, 5: deconfounding and sweep at desk scale

bench::Experiment desk_experiment() {
  bench::Experiment e;
  e.gen = sim::GenConfig::one_step();
  e.gen.T = 20;
  e.gen.n_train = 2000;
  e.gen.n_val = 500;
  e.gen.n_test = 500;
  return e;
}

double timed_run(const bench::Experiment& e, double alpha, double beta, std::uint64_t seed) {
  auto cell = e;
  cell.train.alpha = alpha;
  cell.train.beta = beta;
  const auto t0 = std::chrono::steady_clock::now();
  const double mse = bench::run_one_step(cell, seed).test_mse;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::fprintf(stderr, "  alpha=%g beta=%g seed=%llu test_mse=%.4f (%.0f s)\n", alpha, beta,
               (unsigned long long)seed, mse, secs);
  return mse;
}

void criterion_4(Verdict& v) {
  const auto e = desk_experiment();
  std::vector<double> full, ablate;
  int wins = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    full.push_back(timed_run(e, 0.1, 0.1, seed));
    ablate.push_back(timed_run(e, 0.0, 0.0, seed));
    wins += full.back() < ablate.back();
  }
  const double mf = bench::sample_mean(full), ma = bench::sample_mean(ablate);
  v.require(mf <= 0.9 * ma, fmt("mean MSE %.4f at least 10%% below ablation %.4f", mf, ma));
  v.require(wins >= 2, fmt("strictly below in %d of 3 seeds", wins));
  v.note(fmt("full %.4f +- %.4f, ablation %.4f +- %.4f, relative change %+.1f%%", mf, bench::sample_std(full), ma,
             bench::sample_std(ablate), 100.0 * (mf - ma) / ma));
}

void criterion_5(Verdict& v) {
  const auto e = desk_experiment();
  const std::vector<double> grid{0.0, 0.01, 0.1, 1.0};
  const auto g = bench::sweep(grid, grid, [&](double a, double b, std::uint64_t s) { return timed_run(e, a, b, s); },
                              {1, 2});
  std::ostringstream csv;
  g.write_csv(csv);
  std::fprintf(stderr, "%s", csv.str().c_str());
  const auto [ia, ib] = g.argmin();
  bool complete = true;
  for (const auto& c : g.cells) complete &= c.complete();
  v.require(complete, "every cell completed");
  v.require(!(ia == 0 && ib == 0), fmt("(0, 0) is not the grid minimum (argmin alpha=%g beta=%g)", grid[ia], grid[ib]));
  v.note(fmt("(0,0) mean %.4f, best alpha=%g beta=%g mean %.4f", g.cell(0, 0).mean, grid[ia], grid[ib],
             g.cell(ia, ib).mean));
}

// ---- 6: decision regret

void criterion_6(Verdict& v) {
  bench::Experiment e;
  e.gen = sim::GenConfig::decision();
  e.gen.tau = 5;
  int wins = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = bench::run_decision(e, seed);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    bool shapes = r.decisions.size() == 100;
    for (const auto& d : r.decisions) shapes &= d.predictions.size() == 32;
    double lowest = 0.0;
    for (double x : r.model.per_unit) lowest = std::min(lowest, x);
    for (double x : r.random.per_unit) lowest = std::min(lowest, x);
    v.require(shapes, "100 units with 32 candidates each");
    v.require(lowest >= 0.0, "per-unit regrets are non-negative");
    wins += r.model.avg < r.random.avg;
    std::fprintf(stderr, "  seed=%llu model regret %.4f, random policy %.4f (%.0f s)\n", (unsigned long long)seed,
                 r.model.avg, r.random.avg, secs);
    v.note(fmt("seed %llu: %.4f vs %.4f", (unsigned long long)seed, r.model.avg, r.random.avg));
  }
  v.require(wins >= 2, fmt("model regret below random policy in %d of 3 seeds", wins));
}

// ---- 7: reproducibility and contracts

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DSIV_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

bool same_values(const nn::ParamList& a, const std::vector<std::vector<double>>& snap) {
  for (std::size_t k = 0; k < a.size(); ++k)
    if (!bitwise_equal(a[k].tensor.values(), snap[k])) return false;
  return true;
}

void criterion_7(Verdict& v) {
  const fs::path root = fs::temp_directory_path() / ("dsiv_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(root);
  auto q = [](const fs::path& p) { return "'" + p.string() + "'"; };

  // Every command, then the same command from the resolved config it wrote.
  const nlohmann::json enc = {{"model_dim", 8}, {"num_heads", 2}, {"num_layers", 1}, {"ff_dim", 16}, {"dropout", 0.1}};
  nlohmann::json cfg = {{"verbosity", "quiet"},
                        {"generator", {{"T", 8}, {"n_train", 40}, {"n_val", 10}, {"n_test", 10}}},
                        {"model", {{"encoder", enc}, {"outcome", enc}, {"d_z", 3}, {"d_c", 4}}},
                        {"training", {{"iterations", 4}, {"batch_size", 16}, {"eval_every", 2}}},
                        {"evaluation", {{"seeds", {1, 2}}, {"alphas", {0.0, 0.1}}, {"betas", {0.0, 0.1}}}}};
  nlohmann::json dcfg = cfg;
  dcfg["generator"] = {{"kind", "decision"}, {"n_train", 40}, {"n_val", 10}, {"n_test", 10}};
  std::ofstream(root / "b.json") << cfg.dump();
  std::ofstream(root / "c.json") << dcfg.dump();

  struct Step {
    std::string cmd, data, ckpt;
    std::vector<std::string> files;
  };
  const std::vector<std::pair<std::string, Step>> steps = {
      {"b.json", {"gen", "", "", {"train.csv", "val.csv", "test.csv", "metadata.json"}}},
      {"b.json", {"train", "gen", "", {"checkpoint.json", "train_report.txt", "train_summary.json"}}},
      {"b.json", {"eval", "gen", "train", {"eval_report.json"}}},
      {"b.json", {"sweep", "", "", {"sweep.csv", "sweep.json"}}},
      {"c.json", {"gen", "", "", {"train.csv", "val.csv", "test_history.csv", "test_covariates.csv", "test_oracle.csv", "metadata.json"}}},
      {"c.json", {"train", "gen", "", {"checkpoint.json", "train_report.txt"}}},
      {"c.json", {"decide", "gen", "train", {"decisions.csv", "regret.json"}}}};
  std::size_t compared = 0;
  for (const auto& [config, st] : steps) {
    const std::string tag = config.substr(0, 1) + "_";
    auto args = [&](const fs::path& conf, const std::string& suffix) {
      std::string a = st.cmd + " --config " + q(conf) + " --out " + q(root / (tag + st.cmd + suffix));
      if (!st.data.empty()) a += " --data " + q(root / (tag + st.data));
      if (!st.ckpt.empty()) a += " --checkpoint " + q(root / (tag + st.ckpt) / "checkpoint.json");
      return a;
    };
    const int first = run_cli(args(root / config, ""));
    const int again = run_cli(args(root / (tag + st.cmd) / "resolved_config.json", "_again"));
    v.require(first == 0 && again == 0, tag + st.cmd + " runs");
    for (const auto& f : st.files) {
      const fs::path a = root / (tag + st.cmd) / f, b = root / (tag + st.cmd + "_again") / f;
      v.require(fs::exists(a) && slurp(a) == slurp(b), tag + st.cmd + " rerun reproduces " + f);
      ++compared;
    }
  }

  // CSV round trips, with and without latent columns.
  sim::GenConfig g = sim::GenConfig::one_step();
  g.T = 9;
  const auto ds = sim::generate_simulation(g, 4, 12, sim::TreatmentPolicy::observational);
  for (bool latent : {false, true}) {
    std::stringstream ss;
    write_panel_csv(ss, ds, latent);
    const auto back = read_panel_csv(ss);
    bool ok = back.n == ds.n && back.T == ds.T && bitwise_equal(back.x, ds.x) && bitwise_equal(back.a, ds.a) &&
              bitwise_equal(back.y, ds.y) && bool(back.latent) == latent;
    if (latent && back.latent)
      ok &= bitwise_equal(back.latent->z, ds.latent->z) && bitwise_equal(back.latent->c, ds.latent->c) &&
            bitwise_equal(back.latent->u, ds.latent->u);
    v.require(ok, latent ? "CSV round trip with latent columns" : "CSV round trip");
  }

  // Latent columns: fit only accepts the observed view, which has no latent fields.
  static_assert(!std::is_convertible_v<PanelDataset, ObservedPanel>);
  static_assert(!std::is_invocable_v<decltype(&fit), DsivModel&, const PanelDataset&, const PanelDataset&,
                                     const TrainConfig&, const std::function<void(const IterationRecord&)>&>);
  auto poisoned = ds;
  for (auto* col : {&poisoned.latent->z, &poisoned.latent->c, &poisoned.latent->u})
    for (auto& x : *col) x = std::nan("");
  const ObservedPanel clean = observe(ds), dirty = observe(poisoned);
  v.require(bitwise_equal(clean.x, dirty.x) && bitwise_equal(clean.y, dirty.y) && bitwise_equal(clean.a, dirty.a),
            "observed view ignores latent columns");
  auto train_once = [&](const ObservedPanel& p) {
    DsivModel m(tiny_model(), dims_of(p), Rng(3));
    TrainConfig tc;
    tc.iterations = 3;
    tc.batch_size = 6;
    fit(m, p, p, tc);
    std::vector<double> all;
    for (const auto& prm : m.all_params()) {
      const auto vals = prm.tensor.values();
      all.insert(all.end(), vals.begin(), vals.end());
    }
    return all;
  };
  v.require(bitwise_equal(train_once(clean), train_once(dirty)), "training is unaffected by poisoned latent columns");

  // Alternating phases leave the other parameter groups bitwise unchanged.
  const ObservedPanel tr = linear_panel(16, 5, 1);
  DsivModel m(tiny_model(), dims_of(tr), Rng(5));
  m.y_scale = Standardizer::fit(tr.y);
  Trainer trainer(m, TrainConfig{});
  std::vector<std::size_t> units(16);
  std::iota(units.begin(), units.end(), 0);
  const TrainBatch b = make_batch(tr, units, m.y_scale, WindowSpec::one_step(5));
  const auto main = m.main_params(), var = m.variational_params(), bridge = m.bridge_params();
  auto check = [&](const char* name, auto&& phase, bool main_moves, bool var_moves, bool bridge_moves) {
    const auto sm = nn::snapshot(main), sv = nn::snapshot(var), sb = nn::snapshot(bridge);
    phase();
    v.require(same_values(main, sm) != main_moves && same_values(var, sv) != var_moves &&
                  same_values(bridge, sb) != bridge_moves,
              std::string("phase partition: ") + name);
  };
  check("main", [&] { trainer.phase_main(b); }, true, false, false);
  check("variational", [&] { trainer.phase_variational(b); }, false, true, false);
  check("bridge", [&] { trainer.phase_bridge(b); }, false, false, true);

  fs::remove_all(root);
  v.note(fmt("%zu rerun artifacts compared bitwise", compared));
}

}  // namespace

int main(int argc, char** argv) {
  const char* names[] = {"",
                         "gradient fidelity",
                         "CLUB identities",
                         "generator fidelity",
                         "deconfounding vs ablation",
                         "sweep shape",
                         "decision regret",
                         "reproducibility and contracts"};
  const int k = argc == 2 ? std::atoi(argv[1]) : 0;
  if (k < 1 || k > 7) {
    std::fprintf(stderr, "usage: acceptance <1..7>\n");
    return 2;
  }
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    switch (k) {
      case 1: criterion_1(v); break;
      case 2: criterion_2(v); break;
      case 3: criterion_3(v); break;
      case 4: criterion_4(v); break;
      case 5: criterion_5(v); break;
      case 6: criterion_6(v); break;
      case 7: criterion_7(v); break;
    }
  } catch (const std::exception& e) {
    v.require(false, std::string("exception: ") + e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::string detail;
  for (const auto& n : v.notes) detail += (detail.empty() ? "" : "; ") + n;
  std::printf("criterion %d (%s): %s in %.0f s -- %s\n", k, names[k], v.pass ? "PASS" : "FAIL", secs, detail.c_str());
  return v.pass ? 0 : 1;
}
