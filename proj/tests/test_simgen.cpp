#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <sstream>

#include "dsiv/panel.hpp"
#include "dsiv/simgen.hpp"

using namespace dsiv;
using namespace dsiv::sim;

namespace {

GenConfig small_b(std::size_t n = 20, std::size_t T = 12) {
  GenConfig g = GenConfig::one_step();
  g.n_train = g.n_val = g.n_test = n;
  g.T = T;
  return g;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

bool same_panel(const PanelDataset& a, const PanelDataset& b) {
  return a.n == b.n && a.T == b.T && a.d_x == b.d_x && bitwise_equal(a.x, b.x) && bitwise_equal(a.a, b.a) &&
         bitwise_equal(a.y, b.y);
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dsiv_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Straight-line re-implementation of the decision generator used as an oracle:
// one struct of state, one loop, candidates enumerated from scratch.
struct BruteState {
  std::vector<double> z, c, u, u_lag;
  double a = 0.0, y = 0.0;
  std::vector<double> lags = std::vector<double>(5, 0.0);
};

double brute_terminal(const GenConfig& g, const Coefficients& k, Rng rng, const std::vector<int>& forced) {
  const double hi = g.latent_high;
  BruteState st;
  for (std::size_t i = 0; i < g.d_z; ++i) st.z.push_back(rng.uniform(0.0, hi));
  for (std::size_t i = 0; i < g.d_c; ++i) st.c.push_back(rng.uniform(0.0, hi));
  for (std::size_t i = 0; i < g.d_u; ++i) st.u.push_back(rng.normal());
  st.u_lag.assign(g.d_u, 0.0);
  const std::size_t horizon = g.history + g.tau;
  for (std::size_t t = 0; t < horizon; ++t) {
    double act;
    if (t < g.history) {
      double logit = -0.5 * st.a + 0.2 * st.y - 0.1 * std::sin(double(t));
      std::size_t j = 0;
      for (double v : st.z) logit += k.coef_a[j++] * v - std::cos(v * v);
      for (double v : st.c) logit += k.coef_a[j++] * v - std::cos(v * v);
      for (double v : st.u) logit += k.coef_a[j++] * v - std::cos(v * v);
      act = (1.0 / (1.0 + std::exp(-logit)) >= 0.5) ? 1.0 : 0.0;
    } else {
      act = forced[t - g.history];
    }
    st.lags.insert(st.lags.begin(), act);
    st.lags.pop_back();
    double lin = 0.0;
    std::size_t j = 0;
    for (double v : st.c) lin += k.coef_y[j++] * v;
    for (double v : st.u) lin += k.coef_y[j++] * v;
    for (double v : st.u_lag) lin += k.coef_y[j++] * v;
    double seq = 0.0;
    for (int l = 0; l < 5; ++l) seq += k.coef_seq[l] * st.lags[l];
    const double y = 0.2 * lin - 0.5 * seq + std::sin(double(t));
    st.u_lag = st.u;
    for (auto& v : st.z) v = 0.4 * v + 0.6 * rng.uniform(0.0, hi) + 0.3 * std::sin(double(t));
    for (auto& v : st.c) v = 0.3 * v + 0.7 * rng.uniform(0.0, hi) + 0.2 * std::sin(double(t));
    for (auto& v : st.u) v = rng.normal() - 0.1 * std::cos(double(t));
    st.a = act;
    st.y = y;
  }
  return st.y;
}

}  // namespace

TEST(Simgen, DefaultShapes) {
  GenConfig g = GenConfig::one_step();
  EXPECT_EQ(g.d_x(), 10u);
  EXPECT_EQ(g.T, 100u);
  g.n_train = 3;
  const auto ds = generate_simulation(g, 5, 3, TreatmentPolicy::observational);
  EXPECT_EQ(ds.x.size(), 3u * 100 * 10);
  EXPECT_EQ(ds.y.size(), 3u * 100);
  ASSERT_TRUE(ds.latent);
  EXPECT_EQ(ds.latent->z.size(), 3u * 100 * 3);
  const auto c = GenConfig::decision();
  EXPECT_EQ(c.d_z, 3u);
  EXPECT_EQ(c.d_c, 12u);
  EXPECT_EQ(c.d_u, 5u);
  EXPECT_EQ(c.tau, 5u);
}

TEST(Simgen, InitialLatentsInUnitInterval) {
  GenConfig g = small_b(200, 1);
  const auto ds = generate_simulation(g, 3, 200, TreatmentPolicy::observational);
  // Row 0 is one drift step from the U(0,1) start: 0.4 Z + 0.6 Z' + 0.3 sin 0.
  for (double v : ds.latent->z) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Simgen, RegenerationIsBitwiseIdenticalAndOrderFree) {
  const auto g = small_b();
  const auto a = generate_splits(g);
  const auto b = generate_splits(g);
  EXPECT_TRUE(same_panel(a.train, b.train));
  EXPECT_TRUE(same_panel(a.test, b.test));
  // Unit i does not depend on how many units were generated.
  const auto big = generate_simulation(g, g.traj_seed, 20, TreatmentPolicy::observational);
  const auto small = generate_simulation(g, g.traj_seed, 7, TreatmentPolicy::observational);
  EXPECT_TRUE(same_panel(select_units(big, 0, 7), small));
  GenConfig other = g;
  other.traj_seed += 1;
  EXPECT_FALSE(same_panel(generate_splits(other).train, a.train));
}

TEST(Simgen, MonteCarloDriftMeans) {
  GenConfig g = small_b(100000, 4);
  const auto ds = generate_simulation(g, 11, g.n_train, TreatmentPolicy::random);
  const auto& L = *ds.latent;
  const std::size_t n = ds.n, T = ds.T;
  for (std::size_t s = 1; s < T; ++s) {
    double mz = 0.0, mc = 0.0, mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t r = i * T + s, p = i * T + s - 1;
      mz += L.z[r * g.d_z] - 0.4 * L.z[p * g.d_z];
      mc += L.c[r * g.d_c] - 0.3 * L.c[p * g.d_c];
      mu += L.u[r * g.d_u];
    }
    const double st = std::sin(double(s)), ct = std::cos(double(s));
    EXPECT_NEAR(mz / n, 0.6 * 0.5 + 0.3 * st, 0.01);
    EXPECT_NEAR(mc / n, 0.7 * 0.5 + 0.2 * st, 0.01);
    EXPECT_NEAR(mu / n, -0.1 * ct, 0.01);
  }
}

TEST(Simgen, RandomPolicyIsBalanced) {
  const auto ds = generate_simulation(small_b(1000, 10), 4, 1000, TreatmentPolicy::random, "test");
  EXPECT_GE(ds.treatment_rate(), 0.45);
  EXPECT_LE(ds.treatment_rate(), 0.55);
}

TEST(Simgen, TreatmentThreshold) {
  Rng rng(1);
  const std::vector<double> coef{0.0};
  // -cos(0) + 0.2 * 5 = 0 -> P = 0.5 -> treated.
  EXPECT_EQ(treatment_logit(std::vector<double>{0.0}, 0.0, 5.0, coef, 0), 0.0);
  EXPECT_EQ(assign_treatment(std::vector<double>{0.0}, 0.0, 5.0, coef, 0, TreatmentPolicy::observational, rng), 1);
  EXPECT_EQ(assign_treatment(std::vector<double>{0.0}, 0.0, -95.0, coef, 0, TreatmentPolicy::observational, rng), 0);
  // Hand recomputation for a two-coordinate state.
  const std::vector<double> v{0.3, -1.2}, ca{0.5, -0.25};
  const double expect = 0.5 * 0.3 - std::cos(0.09) - 0.25 * -1.2 - std::cos(1.44) - 0.5 * 1.0 + 0.2 * 0.7 -
                        0.1 * std::sin(3.0);
  EXPECT_DOUBLE_EQ(treatment_logit(v, 1.0, 0.7, ca, 3), expect);
}

TEST(Simgen, OutcomeFormulas) {
  Coefficients k;
  k.coef_y.assign(3, 0.0);
  k.coef_seq.assign(5, 0.0);
  const std::vector<double> vp{1.0, 2.0, 3.0};
  const std::vector<double> a0{0.0};
  EXPECT_EQ(generate_outcome(vp, a0, k, 0, GeneratorKind::one_step), 0.0);
  k.coef_y = {0.5, -1.0, 0.25};
  const std::vector<double> a1{1.0};
  EXPECT_DOUBLE_EQ(generate_outcome(vp, a1, k, 10, GeneratorKind::one_step),
                   0.5 - 2.0 + 0.75 - 0.2 * std::sin(1.0) + 0.5 * std::sin(2.0));
  const std::vector<double> s1{1, 0, 1, 1, 0}, s2{0, 1, 0, 0, 1};
  EXPECT_EQ(generate_outcome(vp, s1, k, 4, GeneratorKind::decision),
            generate_outcome(vp, s2, k, 4, GeneratorKind::decision));
  k.coef_seq = {1, 2, 3, 4, 5};
  EXPECT_DOUBLE_EQ(generate_outcome(vp, s1, k, 4, GeneratorKind::decision),
                   0.2 * (0.5 - 2.0 + 0.75) - 0.5 * (1 + 3 + 4) + std::sin(4.0));
}

TEST(Simgen, CandidatesDifferThroughTreatmentSequence) {
  GenConfig g = GenConfig::decision();
  g.n_test = 3;
  auto set = generate_oracle_set(g, 9, 3);
  // Outcomes differ across candidates only through the sequence term.
  bool any_spread = false;
  for (std::size_t i = 0; i < set.n(); ++i)
    for (std::size_t b = 1; b < set.candidates(); ++b) any_spread |= set.outcome(i, b) != set.outcome(i, 0);
  EXPECT_TRUE(any_spread);
}

TEST(Simgen, CandidateEnumeration) {
  EXPECT_EQ(candidate_label(0, 5), "00000");
  EXPECT_EQ(candidate_label(1, 5), "00001");
  EXPECT_EQ(candidate_label(16, 5), "10000");
  EXPECT_EQ(candidate_sequence(6, 3), (std::vector<double>{1, 1, 0}));
}

TEST(Simgen, OracleMatchesBruteForceRollForward) {
  GenConfig g = GenConfig::decision();
  const auto set = generate_oracle_set(g, g.traj_seed, g.n_test);
  const auto coef = draw_coefficients(g);
  ASSERT_EQ(set.n(), 100u);
  ASSERT_EQ(set.candidates(), 32u);
  for (std::size_t i = 0; i < set.n(); ++i) {
    double best = -INFINITY;
    std::size_t arg = 0;
    for (std::size_t b = 0; b < 32; ++b) {
      std::vector<int> seq(5);
      for (int k = 0; k < 5; ++k) seq[k] = (b >> (4 - k)) & 1;
      const double y = brute_terminal(g, coef, unit_stream(g.traj_seed, "test", i), seq);
      ASSERT_EQ(y, set.outcome(i, b)) << "unit " << i << " candidate " << b;
      if (y > best) {
        best = y;
        arg = b;
      }
    }
    EXPECT_EQ(set.oracle[i], best);
    EXPECT_EQ(set.best[i], arg);
  }
}

TEST(Simgen, OracleHistoryMatchesObservationalPanel) {
  GenConfig g = GenConfig::decision();
  g.n_test = 4;
  const auto set = generate_oracle_set(g, 3, 4);
  const auto full = generate_simulation(g, 3, 4, TreatmentPolicy::observational, "test");
  const std::size_t H = g.history;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t t = 0; t < H; ++t) {
      EXPECT_EQ(set.history_panel.y_at(i, t), full.y_at(i, t));
      EXPECT_EQ(set.history_panel.a_at(i, t), full.a_at(i, t));
      for (std::size_t k = 0; k < g.d_x(); ++k) EXPECT_EQ(set.history_panel.x_at(i, t, k), full.x_at(i, t, k));
    }
}

TEST(Simgen, InvalidConfigRejected) {
  GenConfig g = GenConfig::one_step();
  g.d_z = 0;
  EXPECT_THROW(g.validate(), ConfigError);
  GenConfig c = GenConfig::decision();
  c.tau = 21;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(generate_oracle_set(GenConfig::one_step(), 1, 2), ConfigError);
}

TEST(Panel, CsvRoundTripIsExact) {
  const auto ds = generate_simulation(small_b(5, 7), 8, 5, TreatmentPolicy::random);
  std::stringstream ss;
  write_panel_csv(ss, ds);
  const auto back = read_panel_csv(ss);
  EXPECT_TRUE(same_panel(ds, back));
  EXPECT_FALSE(back.latent);

  std::stringstream with;
  write_panel_csv(with, ds, true);
  const auto full = read_panel_csv(with);
  ASSERT_TRUE(full.latent);
  EXPECT_TRUE(bitwise_equal(full.latent->c, ds.latent->c));
}

TEST(Panel, FileRoundTrip) {
  const auto dir = temp_dir("panel_io");
  const auto ds = generate_simulation(small_b(3, 4), 8, 3, TreatmentPolicy::random);
  save_panel(ds, dir / "p.csv");
  EXPECT_TRUE(same_panel(load_panel(dir / "p.csv"), ds));
  EXPECT_THROW(load_panel(dir / "missing.csv"), IoError);
}

TEST(Panel, HandWrittenFixture) {
  std::stringstream ss(
      "unit,t,x0,x1,a0,y\n"
      "0,1,0.5,1,0,1.25\n"
      "0,2,0.25,2,1,-3\n"
      "1,1,1,0,1,0\n"
      "1,2,2,0,0,1e-3\n"
      "2,1,-1,-2,0,7\n"
      "2,2,-3,-4,1,8\n");
  const auto p = read_panel_csv(ss);
  EXPECT_EQ(p.n, 3u);
  EXPECT_EQ(p.T, 2u);
  EXPECT_EQ(p.d_x, 2u);
  EXPECT_EQ(p.x_at(0, 1, 0), 0.25);
  EXPECT_EQ(p.a_at(1, 0), 1.0);
  EXPECT_EQ(p.y_at(1, 1), 1e-3);
  EXPECT_EQ(p.y_at(2, 1), 8.0);
}

TEST(Panel, ParseErrorsCarryLineAndColumn) {
  std::stringstream missing("unit,t,x0,a0\n0,1,1,0\n");
  try {
    read_panel_csv(missing);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("y"), std::string::npos);
  }
  std::stringstream ragged("unit,t,x0,a0,y\n0,1,1,0,2\n0,2,1,0\n");
  try {
    read_panel_csv(ragged);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  std::stringstream bad("unit,t,x0,a0,y\n0,1,abc,0,2\n");
  EXPECT_THROW(read_panel_csv(bad), ParseError);
}

TEST(Panel, ObserveDropsLatent) {
  const auto ds = generate_simulation(small_b(2, 3), 1, 2, TreatmentPolicy::random);
  const ObservedPanel o = observe(ds);
  EXPECT_TRUE(bitwise_equal(o.x, ds.x));
  EXPECT_TRUE(bitwise_equal(o.y, ds.y));
}
