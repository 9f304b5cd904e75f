#pragma once

// Shared central-finite-difference gradient checker for the graph tests and
// the acceptance suite.

#include <algorithm>
#include <cmath>
#include <random>

#include "dunet/graph.hpp"

namespace dunet::testing {

inline double rel_err(double a, double b) {
  const double denom = std::max({1.0, std::abs(a), std::abs(b)});
  return std::abs(a - b) / denom;
}

// Max relative error between the analytic gradient of `leaf` and a central
// difference of the scalar `loss` value. Re-runs forward after probing so the
// graph is left consistent.
inline double max_grad_rel_err(Graph& g, Node* loss, Node* leaf, bool training = true,
                               double h = 1e-4) {
  g.forward(training);
  g.zero_grad();
  g.backward(loss);
  const Tensor analytic = leaf->grad();
  Tensor& v = leaf->value();
  double worst = 0;
  for (int64_t i = 0; i < v.size(); ++i) {
    const double orig = v[i];
    v[i] = orig + h;
    g.forward(training);
    const double lp = loss->value()[0];
    v[i] = orig - h;
    g.forward(training);
    const double lm = loss->value()[0];
    v[i] = orig;
    const double fd = (lp - lm) / (2 * h);
    worst = std::max(worst, rel_err(fd, analytic[i]));
  }
  g.forward(training);
  return worst;
}

inline Tensor random_tensor(const std::vector<int64_t>& shape, std::mt19937& rng,
                            double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  std::uniform_real_distribution<double> d(lo, hi);
  for (int64_t i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

}  // namespace dunet::testing
