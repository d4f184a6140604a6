#include "kdlab/theory_verify.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace kdlab::theory {

nlohmann::json to_json(const VerificationReport& r) {
  nlohmann::json j;
  j["check"] = r.name;
  j["max_residual"] = r.max_residual;
  j["slope"] = r.slope ? nlohmann::json(*r.slope) : nlohmann::json(nullptr);
  j["threshold"] = r.threshold;
  j["passed"] = r.passed;
  j["trials"] = r.trials;
  j["seed"] = r.seed;
  nlohmann::json d = nlohmann::json::object();
  for (const auto& [k, v] : r.details) d[k] = v;
  j["details"] = std::move(d);
  return j;
}

nlohmann::json to_json(const std::vector<VerificationReport>& reports) {
  auto arr = nlohmann::json::array();
  for (const auto& r : reports) arr.push_back(to_json(r));
  return arr;
}

namespace {

std::vector<double> gaussian_vector(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

kd::HeadParams head_from(std::mt19937_64& rng, std::size_t dim, std::size_t k, double scale = 1.0) {
  kd::HeadParams h;
  h.classes = k;
  h.dim = dim;
  h.weight = gaussian_vector(rng, dim * k, scale);
  h.bias = gaussian_vector(rng, k, scale);
  return h;
}

std::size_t draw_size(std::mt19937_64& rng, std::size_t max) {
  return std::uniform_int_distribution<std::size_t>(2, std::max<std::size_t>(2, max))(rng);
}

}  // namespace

kd::HeadParams random_head(std::size_t dim, std::size_t k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return head_from(rng, dim, k);
}

double expected_log_prob(std::span<const double> z, const kd::HeadParams& head, std::span<const double> p0) {
  const auto l = head.logits(z);
  const double mx = *std::max_element(l.begin(), l.end());
  double s = 0.0;
  for (double v : l) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  double out = 0.0;
  for (std::size_t y = 0; y < l.size(); ++y) out += p0[y] * (l[y] - lse);
  return out;
}

VerificationReport check_first_order_zero(std::size_t dim, std::size_t k, std::size_t trials, std::uint64_t seed,
                                          double dz_scale, double logit_scale) {
  if (dim < 2 || k < 2) throw std::invalid_argument("check_first_order_zero: dim and k must be >= 2");
  std::mt19937_64 rng(seed);
  VerificationReport r{"first_order_zero", 0.0, std::nullopt, 1e-9, false, trials, seed, {}};
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t n = draw_size(rng, dim), kk = draw_size(rng, k);
    const auto head = head_from(rng, n, kk, logit_scale);
    const auto z = gaussian_vector(rng, n);
    const auto dz = gaussian_vector(rng, n, dz_scale);
    const auto p = head.probabilities(z);
    // sum_y p_y d/dz log p_y, summed class by class.
    std::vector<double> expected(n, 0.0);
    for (std::size_t y = 0; y < kk; ++y) {
      const auto g = kd::grad_log_prob(z, head, static_cast<int>(y));
      for (std::size_t i = 0; i < n; ++i) expected[i] += p[y] * g[i];
    }
    double term = 0.0;
    for (std::size_t i = 0; i < n; ++i) term += dz[i] * expected[i];
    r.max_residual = std::max(r.max_residual, std::abs(term));
  }
  r.passed = r.max_residual < r.threshold;
  return r;
}

VerificationReport check_fisher_neg_hessian(std::size_t dim, std::size_t k, std::size_t trials, std::uint64_t seed) {
  if (dim < 2 || k < 2) throw std::invalid_argument("check_fisher_neg_hessian: dim and k must be >= 2");
  std::mt19937_64 rng(seed);
  VerificationReport r{"fisher_neg_hessian", 0.0, std::nullopt, 1e-5, false, trials, seed, {}};
  double offdiag_share = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t n = draw_size(rng, dim), kk = draw_size(rng, k);
    const auto head = head_from(rng, n, kk);
    const auto z = gaussian_vector(rng, n);
    const auto p0 = head.probabilities(z);
    const auto fisher = kd::fisher_matrix(z, head);
    const auto hess = finite_difference_hessian(
        [&](std::span<const double> x) { return expected_log_prob(x, head, p0); }, z, 1e-4);
    double off = 0.0, all = 0.0;
    for (std::size_t i = 0; i < n * n; ++i) {
      r.max_residual = std::max(r.max_residual, std::abs(fisher[i] + hess[i]));
      all += fisher[i] * fisher[i];
      if (i / n != i % n) off += fisher[i] * fisher[i];
    }
    offdiag_share += all > 0.0 ? std::sqrt(off / all) : 0.0;
  }
  r.details.emplace_back("offdiag_frobenius_share_mean", offdiag_share / static_cast<double>(trials));
  r.passed = r.max_residual < r.threshold;
  return r;
}

std::optional<double> loglog_slope(const std::vector<double>& scales, const std::vector<double>& errors,
                                   double floor) {
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < scales.size() && i < errors.size(); ++i) {
    if (scales[i] > 0.0 && errors[i] >= floor) {
      xs.push_back(std::log(scales[i]));
      ys.push_back(std::log(errors[i]));
    }
  }
  if (xs.size() < 2) return std::nullopt;
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  if (sxx == 0.0) return std::nullopt;
  return sxy / sxx;
}

VerificationReport check_taylor_remainder(std::size_t dim, std::size_t k, const std::vector<double>& scales,
                                          std::uint64_t seed, bool zero_direction) {
  if (dim < 2 || k < 2) throw std::invalid_argument("check_taylor_remainder: dim and k must be >= 2");
  for (std::size_t i = 1; i < scales.size(); ++i) {
    if (!(scales[i] < scales[i - 1])) throw std::invalid_argument("check_taylor_remainder: scales must decrease");
  }
  std::mt19937_64 rng(seed);
  VerificationReport r{"taylor_remainder", 0.0, std::nullopt, 2.5, false, 1, seed, {}};
  const auto head = head_from(rng, dim, k);
  const auto z = gaussian_vector(rng, dim);
  auto dz = gaussian_vector(rng, dim);
  if (zero_direction) std::fill(dz.begin(), dz.end(), 0.0);
  else dz = kd::normalize_unit(dz);

  const auto p = head.probabilities(z);
  const auto fisher = kd::fisher_matrix(z, head);
  double quad_full = 0.0, quad_diag = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    quad_diag += fisher[i * dim + i] * dz[i] * dz[i];
    for (std::size_t j = 0; j < dim; ++j) quad_full += dz[i] * fisher[i * dim + j] * dz[j];
  }

  std::vector<double> err_full, err_diag;
  double rel_at_1e2 = -1.0, rel_diag_at_1e2 = -1.0;
  for (double s : scales) {
    std::vector<double> zs(z);
    for (std::size_t i = 0; i < dim; ++i) zs[i] += s * dz[i];
    const double kl = kd::kl_divergence(p, head.probabilities(zs));
    const double q_full = 0.5 * s * s * quad_full;
    const double q_diag = 0.5 * s * s * quad_diag;
    err_full.push_back(std::abs(kl - q_full));
    err_diag.push_back(std::abs(kl - q_diag));
    if (std::abs(s - 1e-2) < 1e-15) {
      rel_at_1e2 = q_full > 0.0 ? std::abs(kl - q_full) / q_full : 0.0;
      rel_diag_at_1e2 = q_diag > 0.0 ? std::abs(kl - q_diag) / q_diag : 0.0;
    }
  }
  r.max_residual = *std::max_element(err_full.begin(), err_full.end());
  r.slope = loglog_slope(scales, err_full);
  const auto diag_slope = loglog_slope(scales, err_diag);
  if (diag_slope) r.details.emplace_back("diag_fisher_slope", *diag_slope);
  if (rel_at_1e2 >= 0.0) {
    r.details.emplace_back("relative_gap_at_1e-2", rel_at_1e2);
    r.details.emplace_back("diag_fisher_relative_gap_at_1e-2", rel_diag_at_1e2);
  }

  if (zero_direction) {
    r.passed = r.max_residual == 0.0;
  } else {
    const bool slope_ok = r.slope && *r.slope >= 2.5 && *r.slope <= 3.5;
    const bool close_ok = rel_at_1e2 < 0.0 || rel_at_1e2 <= 0.1;
    r.passed = slope_ok && close_ok;
  }
  return r;
}

VerificationReport check_lh_hessian_identity(std::size_t k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("check_lh_hessian_identity: k must be >= 2");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> base(-2.0, 2.0);
  VerificationReport r{"lh_hessian_identity", 0.0, std::nullopt, 1e-7, false, 2, seed, {}};
  const double kf = static_cast<double>(k);
  auto lh = [kf](std::span<const double> l) {
    double s = 0.0;
    for (double v : l) s += v * v;
    return s / kf;
  };
  std::vector<std::vector<double>> hessians;
  for (int point = 0; point < 2; ++point) {
    std::vector<double> l(k);
    for (auto& v : l) v = base(rng);
    auto h = finite_difference_hessian(lh, l, 1e-4);
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const double expected = i == j ? 2.0 / kf : 0.0;
        r.max_residual = std::max(r.max_residual, std::abs(h[i * k + j] - expected));
      }
    }
    hessians.push_back(std::move(h));
  }
  double between = 0.0;
  for (std::size_t i = 0; i < k * k; ++i) between = std::max(between, std::abs(hessians[0][i] - hessians[1][i]));
  r.details.emplace_back("max_difference_between_base_points", between);
  r.passed = r.max_residual < r.threshold;
  return r;
}

std::vector<VerificationReport> run_all(std::uint64_t seed) {
  return {
      check_first_order_zero(16, 10, 100, seed),
      check_fisher_neg_hessian(8, 5, 100, seed + 1),
      check_taylor_remainder(8, 5, {1e-1, 3e-2, 1e-2, 3e-3, 1e-3}, seed + 2),
      check_lh_hessian_identity(10, seed + 3),
  };
}

}  // namespace kdlab::theory
