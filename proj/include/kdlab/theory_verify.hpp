#pragma once

// Numerical checks of the second-order view of the KL distillation loss:
// the first-order Taylor term vanishes, the expected negative Hessian of
// log p equals the Fisher matrix, the KL-minus-quadratic remainder is cubic,
// and the mean-squared-logits criterion has Hessian (2/k) I.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdlab/kd_criteria.hpp"

namespace kdlab::theory {

struct VerificationReport {
  std::string name;
  double max_residual = 0.0;
  std::optional<double> slope;
  double threshold = 0.0;
  bool passed = false;
  std::size_t trials = 0;
  std::uint64_t seed = 0;
  // Secondary diagnostics, reported but not gated.
  std::vector<std::pair<std::string, double>> details;
};

nlohmann::json to_json(const VerificationReport& r);
nlohmann::json to_json(const std::vector<VerificationReport>& reports);

// Random head with N(0, 1) weights and biases.
kd::HeadParams random_head(std::size_t dim, std::size_t k, std::uint64_t seed);

// sum_y p_y(z0) log p_y(z): the function whose negative Hessian at z0 is F(z0).
double expected_log_prob(std::span<const double> z, const kd::HeadParams& head, std::span<const double> p0);

// Central second differences of f at x, [n x n] row-major.
template <typename F>
std::vector<double> finite_difference_hessian(F&& f, std::span<const double> x, double step) {
  const std::size_t n = x.size();
  std::vector<double> h(n * n);
  std::vector<double> p(x.begin(), x.end());
  auto eval = [&](std::size_t i, double di, std::size_t j, double dj) {
    p[i] += di;
    p[j] += dj;
    const double v = f(std::span<const double>(p));
    p[i] -= di;
    p[j] -= dj;
    return v;
  };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double v = eval(i, step, j, step) - eval(i, step, j, -step) - eval(i, -step, j, step) +
                       eval(i, -step, j, -step);
      h[i * n + j] = v / (4.0 * step * step);
    }
  }
  return h;
}

// |dz^T sum_y p_y d/dz log p_y| < 1e-9 over random heads, points and directions.
VerificationReport check_first_order_zero(std::size_t dim, std::size_t k, std::size_t trials,
                                          std::uint64_t seed, double dz_scale = 1.0,
                                          double logit_scale = 1.0);

// Full Fisher matrix vs finite-difference -E_p[Hessian log p], elementwise < 1e-5.
VerificationReport check_fisher_neg_hessian(std::size_t dim, std::size_t k, std::size_t trials,
                                            std::uint64_t seed);

// err(s) = |KL(p(z) || p(z + s dz)) - s^2/2 dz^T F dz|; fitted log-log slope in [2.5, 3.5]
// and KL within 10% of the quadratic at s = 1e-2.
VerificationReport check_taylor_remainder(std::size_t dim, std::size_t k, const std::vector<double>& scales,
                                          std::uint64_t seed, bool zero_direction = false);

// Finite-difference Hessian of (1/k) sum l^2 equals (2/k) I within 1e-7 at two base points.
VerificationReport check_lh_hessian_identity(std::size_t k, std::uint64_t seed);

// Least-squares slope of log(err) against log(scale), ignoring err < floor.
std::optional<double> loglog_slope(const std::vector<double>& scales, const std::vector<double>& errors,
                                   double floor = 1e-14);

std::vector<VerificationReport> run_all(std::uint64_t seed);

}  // namespace kdlab::theory
