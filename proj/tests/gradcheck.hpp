#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "kdlab/autodiff.hpp"

namespace kdlab::testing {

using ad::Tensor;

// Worst |analytic - numeric| / max(1, |analytic|, |numeric|) over every
// element of every input, with central differences of the given step.
inline double gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                        double step = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  ad::backward(f(inputs));
  double worst = 0.0;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto values = t.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = f(inputs).item();
      values[i] = saved - step;
      const double down = f(inputs).item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)}));
    }
  }
  return worst;
}

inline std::vector<double> uniform(std::size_t n, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

inline Tensor random_param(ad::Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  const auto n = ad::shape_size(shape);
  return Tensor::parameter(std::move(shape), uniform(n, rng, lo, hi));
}

}  // namespace kdlab::testing
