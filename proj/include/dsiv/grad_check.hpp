#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dsiv/tensor.hpp"

namespace dsiv {

struct GradReport {
  /// Max relative error per input, in the order the inputs were given.
  std::vector<double> max_rel_error;
  double eps = 0.0;
  double tolerance = 0.0;
  bool pass = false;

  double worst() const {
    return max_rel_error.empty() ? 0.0 : *std::max_element(max_rel_error.begin(), max_rel_error.end());
  }
};

/// Compares analytic gradients of `builder()` with central finite differences
/// (f(x+eps) - f(x-eps)) / (2 eps). Relative error uses max(|a|, |b|, 1e-8).
inline GradReport grad_check(const std::function<Tensor()>& builder, std::vector<Tensor> params, double eps = 1e-5,
                             double tolerance = 1e-4) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw ConfigError("grad_check eps must be in [1e-7, 1e-3]");
  auto eval = [&] {
    NoGradGuard guard;
    return builder().item();
  };
  const double f0 = eval();
  const double f1 = eval();
  if (f0 != f1 && !(std::isnan(f0) && std::isnan(f1)))
    throw DeterminismError("loss builder returned different values on re-evaluation");

  for (auto& p : params) p.zero_grad();
  const Tensor loss = builder();
  loss.backward();

  GradReport report;
  report.eps = eps;
  report.tolerance = tolerance;
  for (auto& p : params) {
    const std::vector<double> analytic = p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                                      : std::vector<double>(p.numel(), 0.0);
    auto x = p.mutable_data();
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + eps;
      const double up = eval();
      x[i] = saved - eps;
      const double down = eval();
      x[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    report.max_rel_error.push_back(worst);
  }
  for (auto& p : params) p.zero_grad();
  report.pass = report.worst() <= tolerance;
  return report;
}

}  // namespace dsiv
