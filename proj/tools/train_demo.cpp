// Trains one model on a small synthetic panel and prints the loss trace.
//   train_demo [iterations] [alpha] [beta] [seed]

#include <cstdio>
#include <cstdlib>

#include "dsiv/dsiv.hpp"

int main(int argc, char** argv) {
  using namespace dsiv;
  const std::size_t iters = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 20;
  const double alpha = argc > 2 ? std::atof(argv[2]) : 0.1;
  const double beta = argc > 3 ? std::atof(argv[3]) : 0.1;
  const std::uint64_t seed = argc > 4 ? std::strtoull(argv[4], nullptr, 10) : 1;

  bench::Experiment e;
  e.gen.T = 20;
  e.gen.n_train = 2000;
  e.gen.n_val = 500;
  e.gen.n_test = 500;
  e.train.iterations = iters;
  e.train.alpha = alpha;
  e.train.beta = beta;

  const auto g = bench::seeded_generator(e.gen, seed);
  const auto d = sim::generate_splits(g);
  std::printf("treatment rate train %.4f test %.4f, outcome std %.4f\n", d.train.treatment_rate(),
              d.test.treatment_rate(), d.test.outcome_std());
  const auto train = observe(d.train), val = observe(d.val), test = observe(d.test);
  DsivModel m = bench::init_model(e.model, dims_of(train), seed);
  TrainConfig tc = e.train;
  tc.seed = seed;
  const auto report = fit(m, train, val, tc, [](const IterationRecord& r) {
    std::printf("%4zu mse %.4f mi %+.4f adv %+.4f lld %.4f f %+.4f val %.4f\n", r.iteration, r.mse, r.mi, r.adv,
                r.lld, r.f_view, r.val_mse);
    std::fflush(stdout);
  });
  std::printf("best iteration %zu val %.5f, %.1f s\n", report.best_iteration, report.best_val_mse, report.seconds);
  std::printf("test mse %.5f\n", bench::evaluate_one_step(m, test));
}
