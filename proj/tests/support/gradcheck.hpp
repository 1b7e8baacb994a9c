#pragma once

// Central finite-difference oracle for gradient tests. It only evaluates the
// forward function, so it shares no code path with the analytic backward.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "segkit/ops.hpp"

namespace segkit::testing {

using Forward = std::function<Tensor<double>(Graph<double>&)>;

struct GradReport {
  double max_rel_error = 0;
  std::string worst;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

inline double rel_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheckOptions {
  double step = 1e-3;
  // Skip elements whose h and h/2 estimates disagree by more than a smooth
  // function allows (a relu switching inside the stencil); counted in
  // GradReport::skipped. The disagreement is measured against the same floor
  // as the error. Composite heads need this; single ops don't.
  bool skip_kinks = false;
  // Denominator floor of the relative error.
  double floor = 1e-8;
};

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true, double lo = -1,
                                    double hi = 1) {
  const std::size_t n = numel(shape);
  return Tensor<double>(std::move(shape), random_values(n, rng, lo, hi), requires_grad);
}

// Reduces `forward`'s output to a scalar with fixed random weights, runs the
// analytic backward once, then compares every element of every `inputs`
// gradient against central differences (f(x+h) - f(x-h)) / 2h, Richardson
// extrapolated over h and h/2 so a moderate step keeps both truncation and
// roundoff below the tolerance.
inline GradReport check_gradients(const Forward& forward, std::vector<Tensor<double>> inputs, std::mt19937_64& rng,
                                  GradCheckOptions opts = {}) {
  const double step = opts.step;
  std::vector<double> weights;
  auto scalarize = [&](Graph<double>& g) {
    Tensor<double> out = forward(g);
    if (weights.empty()) weights = random_values(out.numel(), rng, 0.5, 1.5);
    Tensor<double> w(out.shape(), weights);
    return reduce_sum(g, mul(g, out, w));
  };
  for (auto& t : inputs) t.clear_grad();
  {
    Graph<double> g;
    Tensor<double> loss = scalarize(g);
    g.backward(loss);
  }
  GradReport report;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor<double>& t = inputs[ti];
    std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                : std::vector<double>(t.numel(), 0.0);
    auto data = t.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      auto central = [&](double h) {
        Graph<double> g(GraphMode::inference);
        data[i] = saved + h;
        const double up = scalarize(g).item();
        data[i] = saved - h;
        const double down = scalarize(g).item();
        data[i] = saved;
        return (up - down) / (2 * h);
      };
      const double coarse = central(step);
      const double fine = central(step / 2);
      const double numeric = (4 * fine - coarse) / 3;
      if (opts.skip_kinks && std::abs(coarse - fine) > 1e-4 * std::max(std::abs(fine), opts.floor)) {
        ++report.skipped;
        continue;
      }
      ++report.checked;
      const double err = rel_error(analytic[i], numeric, opts.floor);
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = "input " + std::to_string(ti) + " element " + std::to_string(i) + ": analytic " +
                       std::to_string(analytic[i]) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return report;
}

}  // namespace segkit::testing
