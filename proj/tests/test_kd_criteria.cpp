#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "gradcheck.hpp"
#include "kdlab/kd_criteria.hpp"
#include "kdlab/theory_verify.hpp"

using namespace kdlab;
using ad::Tensor;
using kd::HeadParams;

namespace {

std::vector<double> vec(std::span<const double> s) { return {s.begin(), s.end()}; }

std::vector<double> random_probs(std::size_t k, std::mt19937_64& rng) {
  auto l = testing::uniform(k, rng, -3.0, 3.0);
  return kd::softmax(l);
}

// log p_y(z) for a head, on the tape.
Tensor tape_log_prob(const Tensor& z, const HeadParams& head, std::size_t y) {
  const auto w = Tensor::constant({head.classes, head.dim}, head.weight);
  const auto b = Tensor::constant({head.classes}, head.bias);
  const auto lp = ad::log_softmax(ad::linear(z, w, b));
  std::vector<double> onehot(head.classes, 0.0);
  onehot[y] = 1.0;
  return ad::sum(ad::mul(lp, Tensor::constant({1, head.classes}, onehot)));
}

Tensor tape_mean_sq_logits(const Tensor& z, const HeadParams& head) {
  const auto w = Tensor::constant({head.classes, head.dim}, head.weight);
  const auto b = Tensor::constant({head.classes}, head.bias);
  return ad::scale(ad::sum(ad::square(ad::linear(z, w, b))), 1.0 / static_cast<double>(head.classes));
}

double plain_se(const std::vector<double>& a, const std::vector<double>& b, std::size_t rows) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(rows);
}

}  // namespace

TEST_CASE("kl divergence") {
  const std::vector<double> half = {0.5, 0.5};
  CHECK(kd::kl_divergence(half, half) == 0.0);
  const std::vector<double> pt = {0.9, 0.1};
  CHECK(kd::kl_divergence(pt, half) == doctest::Approx(0.9 * std::log(1.8) + 0.1 * std::log(0.2)).epsilon(1e-14));
  CHECK(kd::kl_divergence(pt, half) == doctest::Approx(0.368).epsilon(1e-3));
  const std::vector<double> with_zero = {1.0, 0.0};
  CHECK(kd::kl_divergence(with_zero, half) == doctest::Approx(std::log(2.0)));

  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    const auto a = random_probs(5, rng), b = random_probs(5, rng);
    CHECK(kd::kl_divergence(a, b) >= 0.0);
  }
  const std::vector<double> not_normalized = {0.5, 0.6};
  CHECK_THROWS_AS(kd::kl_divergence(not_normalized, half), std::invalid_argument);
  const std::vector<double> vanishing = {1.0, 0.0};
  CHECK_THROWS_AS(kd::kl_divergence(half, vanishing), std::domain_error);

  // Batched form is the row mean.
  const auto a = random_probs(3, rng), b = random_probs(3, rng), c = random_probs(3, rng), d = random_probs(3, rng);
  std::vector<double> t(a), s(b);
  t.insert(t.end(), c.begin(), c.end());
  s.insert(s.end(), d.begin(), d.end());
  CHECK(kd::kl_divergence(Tensor::constant({2, 3}, t), Tensor::constant({2, 3}, s)) ==
        doctest::Approx((kd::kl_divergence(a, b) + kd::kl_divergence(c, d)) / 2).epsilon(1e-14));
}

TEST_CASE("fisher diagonal") {
  const auto id2 = HeadParams::identity(2);
  const std::vector<double> z0 = {0.0, 0.0};
  CHECK(vec(kd::fisher_diag_full(z0, id2).w) == std::vector<double>{0.25, 0.25});
  const std::vector<double> saturated = {800.0, 0.0};
  for (double v : kd::fisher_diag_full(saturated, id2).w) CHECK(std::abs(v) < 1e-12);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t dim = 2 + seed % 7, k = 2 + seed % 4;
    const auto head = theory::random_head(dim, k, seed);
    std::mt19937_64 rng(seed);
    const auto z = testing::uniform(dim, rng);
    const auto p = head.probabilities(z);
    std::vector<double> brute(dim * dim, 0.0);
    for (std::size_t y = 0; y < k; ++y) {
      const auto g = kd::grad_log_prob(z, head, static_cast<int>(y));
      for (std::size_t i = 0; i < dim; ++i)
        for (std::size_t j = 0; j < dim; ++j) brute[i * dim + j] += p[y] * g[i] * g[j];
    }
    const auto diag = kd::fisher_diag_full(z, head);
    const auto full = kd::fisher_matrix(z, head);
    for (std::size_t i = 0; i < dim; ++i) {
      CHECK(diag.w[i] >= 0.0);
      CHECK(std::abs(diag.w[i] - brute[i * dim + i]) < 1e-10);
    }
    for (std::size_t i = 0; i < dim * dim; ++i) CHECK(std::abs(full[i] - brute[i]) < 1e-10);
  }
}

TEST_CASE("empirical Fisher tracks the full Fisher in expectation") {
  const auto head = theory::random_head(8, 5, 3);
  std::mt19937_64 rng(4);
  const auto z = testing::uniform(8, rng, -1.0, 1.0);
  const auto p = head.probabilities(z);
  std::discrete_distribution<int> draw(p.begin(), p.end());
  std::vector<double> mean(8, 0.0);
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const auto w = kd::weight_diag(kd::grad_le(z, head, draw(rng)), kd::WeightSource::EmpiricalFisher);
    for (std::size_t j = 0; j < 8; ++j) mean[j] += w.w[j] / n;
  }
  const auto full = kd::fisher_diag_full(z, head).w;
  const double ma = std::accumulate(mean.begin(), mean.end(), 0.0) / 8, mb = std::accumulate(full.begin(), full.end(), 0.0) / 8;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t j = 0; j < 8; ++j) {
    sab += (mean[j] - ma) * (full[j] - mb);
    saa += (mean[j] - ma) * (mean[j] - ma);
    sbb += (full[j] - mb) * (full[j] - mb);
  }
  CHECK(sab / std::sqrt(saa * sbb) > 0.9);
}

TEST_CASE("gradients of L_E and L_H") {
  const auto id2 = HeadParams::identity(2);
  const std::vector<double> z0 = {0.0, 0.0};
  CHECK(kd::grad_le(z0, id2, 0) == std::vector<double>{0.5, -0.5});
  const std::vector<double> saturated = {800.0, 0.0};
  for (double v : kd::grad_le(saturated, id2, 0)) CHECK(std::abs(v) < 1e-12);
  CHECK_THROWS_AS(kd::grad_le(z0, id2, 2), std::out_of_range);
  const std::vector<double> l = {1.0, -1.0};
  CHECK(kd::grad_lh(l, id2) == std::vector<double>{1.0, -1.0});
  CHECK(kd::grad_lh(z0, id2) == std::vector<double>{0.0, 0.0});

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto head = theory::random_head(6, 4, seed);
    std::mt19937_64 rng(seed + 100);
    const auto z = testing::uniform(6, rng);
    const int y = static_cast<int>(seed % 4);
    auto zt = Tensor::parameter({1, 6}, z);
    ad::backward(tape_log_prob(zt, head, static_cast<std::size_t>(y)));
    const auto le = kd::grad_le(z, head, y);
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(le[i] - zt.grad()[i]) < 1e-10);

    auto zh = Tensor::parameter({1, 6}, z);
    ad::backward(tape_mean_sq_logits(zh, head));
    const auto lh = kd::grad_lh(z, head);
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(lh[i] - zh.grad()[i]) < 1e-10);
  }
}

TEST_CASE("weight diagonal and its normalization") {
  const std::vector<double> g = {1, -2, 3};
  CHECK(kd::weight_diag(g, kd::WeightSource::LogitMagnitude).w == std::vector<double>{1, 4, 9});
  CHECK(kd::weight_diag(std::vector<double>{0, 0}, kd::WeightSource::LogitMagnitude).w == std::vector<double>{0, 0});
  CHECK(kd::WeightDiag::identity(3).w == std::vector<double>{1, 1, 1});

  std::mt19937_64 rng(5);
  const auto r = testing::uniform(7, rng);
  const auto w = kd::weight_diag(r, kd::WeightSource::EmpiricalFisher).w;
  for (std::size_t i = 0; i < 7; ++i) CHECK(w[i] == r[i] * r[i]);  // diagonal of r r^T

  kd::WeightDiag a{{0.5, 1.5}, kd::WeightSource::LogitMagnitude};
  const auto na = kd::normalize_weight_diag(a);
  CHECK(na.w == std::vector<double>{0.0, 2.0});
  CHECK(na.clamp_fraction == 0.0);
  CHECK(na.normalized);

  kd::WeightDiag c{{7, 7, 7}, kd::WeightSource::LogitMagnitude};
  CHECK(kd::normalize_weight_diag(c).w == std::vector<double>{1, 1, 1});

  kd::WeightDiag b{{1, 4, 9}, kd::WeightSource::LogitMagnitude};
  const auto nb = kd::normalize_weight_diag(b);
  const double mu = 14.0 / 3.0;
  const double sigma = std::sqrt(((1 - mu) * (1 - mu) + (4 - mu) * (4 - mu) + (9 - mu) * (9 - mu)) / 3.0);
  const double pre0 = (1 - mu) / sigma + 1, pre1 = (4 - mu) / sigma + 1, pre2 = (9 - mu) / sigma + 1;
  CHECK(pre0 < 0.0);
  CHECK(std::abs((pre0 + pre1 + pre2) / 3.0 - 1.0) < 1e-9);
  CHECK(nb.w[0] == 0.0);
  CHECK(nb.w[1] == doctest::Approx(pre1).epsilon(1e-14));
  CHECK(nb.w[2] == doctest::Approx(pre2).epsilon(1e-14));
  CHECK(nb.clamp_fraction == doctest::Approx(1.0 / 3.0));

  CHECK_THROWS(kd::normalize_weight_diag(kd::WeightDiag{{1.0}, kd::WeightSource::LogitMagnitude}));
}

TEST_CASE("normalized weights: mean 1, variance 1, idempotent when unclamped") {
  std::mt19937_64 rng(6);
  int unclamped = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + trial % 6;
    const auto w = kd::normalize_weight_diag(
        kd::WeightDiag{testing::uniform(n, rng, 0.0, 1.0), kd::WeightSource::LogitMagnitude});
    for (double v : w.w) CHECK(v >= 0.0);
    if (w.clamp_fraction > 0.0) continue;
    ++unclamped;
    double mean = 0, var = 0;
    for (double v : w.w) mean += v / n;
    for (double v : w.w) var += (v - mean) * (v - mean) / n;
    CHECK(std::abs(mean - 1.0) < 1e-9);
    CHECK(std::abs(var - 1.0) < 1e-6);
    const auto again = kd::normalize_weight_diag(w);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(again.w[i] - w.w[i]) < 1e-9);
  }
  CHECK(unclamped > 50);
}

TEST_CASE("unit normalization") {
  CHECK(kd::normalize_unit(std::vector<double>{3, 4}) == std::vector<double>{0.6, 0.8});
  CHECK(kd::normalize_unit(std::vector<double>{0, 0}) == std::vector<double>{0, 0});
  std::mt19937_64 rng(7);
  for (int i = 0; i < 100; ++i) {
    const auto u = kd::normalize_unit(testing::uniform(9, rng));
    double n = 0;
    for (double v : u) n += v * v;
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-12);
  }
}

TEST_CASE("generalized divergence") {
  const auto zs = Tensor::constant({1, 2}, {1, 0});
  const auto zt = Tensor::constant({1, 2}, {0, 0});
  CHECK(kd::d_g(zs, zt, kd::WeightDiag::identity(2)).item() == 1.0);
  CHECK(kd::d_g(zs, zs, kd::WeightDiag::identity(2)).item() == 0.0);

  std::mt19937_64 rng(8);
  for (int i = 0; i < 100; ++i) {
    const auto a = testing::uniform(12, rng), b = testing::uniform(12, rng);
    const double dg = kd::d_g(Tensor::constant({3, 4}, a), Tensor::constant({3, 4}, b), kd::WeightDiag::identity(4)).item();
    CHECK(std::abs(dg - plain_se(a, b, 3)) < 1e-12);
  }
  CHECK_THROWS_AS(kd::d_g(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}), Tensor::zeros({2, 3})), ad::ShapeError);

  SUBCASE("gradient flows into the student only") {
    auto s = testing::random_param({3, 4}, rng);
    auto t = testing::random_param({3, 4}, rng);
    auto w = testing::random_param({3, 4}, rng, 0.0, 2.0);
    ad::backward(kd::d_g(s, t, w));
    CHECK(s.has_grad());
    CHECK_FALSE(t.has_grad());
    CHECK_FALSE(w.has_grad());
  }
  SUBCASE("gradient descent on a free vector converges to the teacher") {
    const auto t = Tensor::constant({1, 5}, testing::uniform(5, rng));
    const auto w = Tensor::constant({1, 5}, testing::uniform(5, rng, 0.2, 2.0));
    auto s = Tensor::parameter({1, 5}, testing::uniform(5, rng));
    for (int step = 0; step < 500; ++step) {
      s.zero_grad();
      ad::backward(kd::d_g(s, t, w));
      auto v = s.mutable_values();
      for (std::size_t i = 0; i < 5; ++i) v[i] -= 0.2 * s.grad()[i];
    }
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(s.values()[i] - t.values()[i]) < 1e-9);
  }
  SUBCASE("gradcheck") {
    const auto t = Tensor::constant({3, 4}, testing::uniform(12, rng));
    const auto w = Tensor::constant({3, 4}, testing::uniform(12, rng, 0.0, 2.0));
    for (int trial = 0; trial < 100; ++trial) {
      CHECK(testing::gradcheck([&](const auto& in) { return kd::d_g(in[0], t, w); }, {testing::random_param({3, 4}, rng)}) < 1e-4);
      CHECK(testing::gradcheck([&](const auto& in) { return kd::d_g_mc(in[0], t, w); }, {testing::random_param({3, 4}, rng)}) < 1e-4);
    }
  }
}

TEST_CASE("d_g on unit-normalized features") {
  const auto u = Tensor::constant({1, 2}, {0.6, 0.8});
  const auto ones = Tensor::constant({1, 2}, {1, 1});
  CHECK(kd::d_g_mc(Tensor::constant({1, 2}, {3, 4}), u, ones).item() == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(kd::d_g_mc(Tensor::constant({1, 2}, {-3, -4}), u, ones).item() == doctest::Approx(4.0).epsilon(1e-14));

  std::mt19937_64 rng(9);
  const auto a = testing::uniform(8, rng), b = testing::uniform(8, rng), w = testing::uniform(8, rng, 0, 2);
  double manual = 0.0;
  for (std::size_t r = 0; r < 2; ++r) {
    const auto na = kd::normalize_unit(std::span<const double>(a).subspan(r * 4, 4));
    const auto nb = kd::normalize_unit(std::span<const double>(b).subspan(r * 4, 4));
    for (std::size_t i = 0; i < 4; ++i) manual += w[r * 4 + i] * (na[i] - nb[i]) * (na[i] - nb[i]);
  }
  CHECK(kd::d_g_mc(Tensor::constant({2, 4}, a), Tensor::constant({2, 4}, b), Tensor::constant({2, 4}, w)).item() ==
        doctest::Approx(manual / 2).epsilon(1e-13));
  CHECK_THROWS_AS(kd::d_g_mc(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}), Tensor::zeros({2, 4})), ad::ShapeError);
}

TEST_CASE("combined criterion decomposes into its two terms") {
  std::mt19937_64 rng(10);
  const auto ls = Tensor::constant({2, 3}, testing::uniform(6, rng));
  const auto lt = Tensor::constant({2, 3}, testing::uniform(6, rng));
  const auto zs = Tensor::constant({2, 4}, testing::uniform(8, rng));
  const auto zt = Tensor::constant({2, 4}, testing::uniform(8, rng));
  const auto w = Tensor::constant({2, 4}, testing::uniform(8, rng, 0, 2));
  const auto ones3 = Tensor::constant({2, 3}, std::vector<double>(6, 1.0));
  const double logits_term = kd::d_g(kd::normalize_unit(ls), kd::normalize_unit(lt), ones3).item();
  const double feature_term = kd::d_g_mc(zs, zt, w).item();
  CHECK(kd::d_g_bc(ls, lt, zs, zt, w).item() == doctest::Approx(15 * logits_term + 3 * feature_term).epsilon(1e-13));
  CHECK(kd::d_g_bc(ls, lt, zt, zt, w).item() == doctest::Approx(15 * logits_term).epsilon(1e-13));
  CHECK(kd::d_g_bc(lt, lt, zt, zt, w).item() == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(kd::d_g_bc(ls, lt, zs, zt, w, 2.0, 0.5).item() ==
        doctest::Approx(2 * logits_term + 0.5 * feature_term).epsilon(1e-13));
}

TEST_CASE("Hinton KD") {
  std::mt19937_64 rng(11);
  const auto l = Tensor::constant({3, 4}, testing::uniform(12, rng));
  CHECK(std::abs(kd::hkd_loss(l, l, 4.0).item()) < 1e-14);
  CHECK_THROWS_AS(kd::hkd_loss(l, l, 0.0), std::invalid_argument);

  const auto ls = testing::uniform(12, rng), lt = testing::uniform(12, rng);
  const double T = 3.0;
  double manual = 0.0;
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<double> a(4), b(4);
    for (std::size_t i = 0; i < 4; ++i) a[i] = lt[r * 4 + i] / T, b[i] = ls[r * 4 + i] / T;
    manual += T * T * kd::kl_divergence(kd::softmax(a), kd::softmax(b)) / 3.0;
  }
  CHECK(kd::hkd_loss(Tensor::constant({3, 4}, ls), Tensor::constant({3, 4}, lt), T).item() ==
        doctest::Approx(manual).epsilon(1e-12));

  // Large T: T^2 KL -> (1/2k) sum of squared differences of centered logits.
  auto centered_se = [&] {
    double s = 0.0;
    for (std::size_t r = 0; r < 3; ++r) {
      double md = 0.0;
      for (std::size_t i = 0; i < 4; ++i) md += (ls[r * 4 + i] - lt[r * 4 + i]) / 4;
      for (std::size_t i = 0; i < 4; ++i) {
        const double d = ls[r * 4 + i] - lt[r * 4 + i] - md;
        s += d * d;
      }
    }
    return s / (2.0 * 4.0) / 3.0;
  }();
  double prev_gap = 1e300;
  for (double t : {10.0, 100.0, 1000.0}) {
    const double v = kd::hkd_loss(Tensor::constant({3, 4}, ls), Tensor::constant({3, 4}, lt), t).item();
    const double gap = std::abs(v - centered_se);
    CHECK(gap < prev_gap);
    prev_gap = gap;
  }
  CHECK(prev_gap / centered_se < 1e-2);

  for (int trial = 0; trial < 100; ++trial) {
    CHECK(testing::gradcheck([&](const auto& in) { return kd::hkd_loss(in[0], Tensor::constant({3, 4}, lt), 2.5); },
                             {testing::random_param({3, 4}, rng)}) < 1e-4);
  }
}

TEST_CASE("variants, defaults and validation") {
  for (auto v : kd::all_variants()) CHECK(kd::parse_variant(kd::to_string(v)) == v);
  CHECK(kd::to_string(kd::Variant::None) == "vanilla");
  CHECK(kd::parse_variant("HKD") == kd::Variant::HintonKD);
  CHECK_THROWS_AS(kd::parse_variant("nope"), std::invalid_argument);

  CHECK(kd::KdCriterion::defaults(kd::Variant::FeaturesSE).lambda == 3.0);
  CHECK(kd::KdCriterion::defaults(kd::Variant::WeightedEFeaturesSE).lambda == 3.0);
  CHECK(kd::KdCriterion::defaults(kd::Variant::WeightedHFeaturesSE).lambda == 3.0);
  CHECK(kd::KdCriterion::defaults(kd::Variant::LogitsSE).lambda == 15.0);
  CHECK(kd::KdCriterion::defaults(kd::Variant::CombinedBC).lambda == 1.0);
  CHECK(kd::KdCriterion::defaults(kd::Variant::HintonKD).lambda == 1.0);
  CHECK(kd::KdCriterion::defaults(kd::Variant::HintonKD).temperature == 4.0);
  CHECK(kd::KdCriterion::defaults(kd::Variant::None).lambda == 0.0);
  const auto bc = kd::KdCriterion::defaults(kd::Variant::CombinedBC);
  CHECK(bc.lambda_f == 3.0);
  CHECK(bc.lambda_l == 15.0);

  kd::KdCriterion bad = kd::KdCriterion::defaults(kd::Variant::LogitsSE);
  bad.lambda = -1;
  CHECK_THROWS(bad.validate());
  bad.lambda = 1;
  bad.temperature = 0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("total loss") {
  std::mt19937_64 rng(12);
  const auto head = theory::random_head(4, 3, 12);
  const auto zt = Tensor::constant({5, 4}, testing::uniform(20, rng));
  const auto wt = Tensor::constant({3, 4}, head.weight), bt = Tensor::constant({3}, head.bias);
  const auto lt = ad::linear(zt, wt, bt);
  const int labels[] = {0, 1, 2, 1, 0};

  auto student_logits = testing::random_param({5, 3}, rng);
  auto student_features = testing::random_param({5, 4}, rng);
  const kd::StudentOutputs student{student_logits, student_features};
  const double ce = ad::softmax_cross_entropy(student_logits, labels).item();

  for (auto v : kd::all_variants()) {
    INFO(kd::to_string(v));
    auto crit = kd::KdCriterion::defaults(v);
    const auto signals = kd::make_teacher_signals(crit, zt, lt, head, labels);
    const auto probs = signals.probs.values();
    for (std::size_t r = 0; r < 5; ++r) CHECK(std::abs(probs[r * 3] + probs[r * 3 + 1] + probs[r * 3 + 2] - 1.0) < 1e-12);
    CHECK_FALSE(signals.features.requires_grad());

    crit.lambda = 0.0;
    CHECK(kd::kd_total_loss(crit, student, signals, labels).total.item() == ce);

    crit.lambda = 2.5;
    const auto terms = kd::kd_total_loss(crit, student, signals, labels);
    double d = 0.0;
    switch (v) {
      case kd::Variant::None: d = 0.0; break;
      case kd::Variant::LogitsSE:
        d = kd::d_g(kd::normalize_unit(student_logits), kd::normalize_unit(lt), kd::WeightDiag::identity(3)).item();
        break;
      case kd::Variant::HintonKD: d = kd::hkd_loss(student_logits, lt, 4.0).item(); break;
      case kd::Variant::CombinedBC:
        d = kd::d_g_bc(student_logits, lt, student_features, zt, signals.weights).item();
        break;
      default: d = kd::d_g_mc(student_features, zt, signals.weights).item();
    }
    CHECK(terms.cross_entropy == ce);
    CHECK(terms.divergence == doctest::Approx(d).epsilon(1e-13));
    if (v != kd::Variant::None) CHECK(terms.total.item() == doctest::Approx(ce + 2.5 * d).epsilon(1e-13));

    // Self-distillation: identical signals give zero divergence.
    const kd::StudentOutputs self{lt, zt};
    CHECK(std::abs(kd::kd_total_loss(crit, self, signals, labels).divergence) < 1e-14);
  }

  SUBCASE("weights follow the criterion's source") {
    auto e = kd::KdCriterion::defaults(kd::Variant::WeightedEFeaturesSE);
    const auto s = kd::make_teacher_signals(e, zt, lt, head, labels);
    const auto row0 = kd::normalize_weight_diag(kd::weight_diag(
        kd::grad_le(zt.values().subspan(0, 4), head, labels[0]), kd::WeightSource::EmpiricalFisher));
    for (std::size_t i = 0; i < 4; ++i) CHECK(s.weights.values()[i] == row0.w[i]);
    CHECK_THROWS_AS(kd::make_teacher_signals(e, zt, lt, head, {}), std::invalid_argument);

    auto plain = kd::KdCriterion::defaults(kd::Variant::FeaturesSE);
    const auto sp = kd::make_teacher_signals(plain, zt, lt, head, {});
    for (double w : sp.weights.values()) CHECK(w == 1.0);
  }
  SUBCASE("variant and signal mismatches are rejected") {
    const auto h = kd::KdCriterion::defaults(kd::Variant::WeightedHFeaturesSE);
    const auto e = kd::KdCriterion::defaults(kd::Variant::WeightedEFeaturesSE);
    const auto sh = kd::make_teacher_signals(h, zt, lt, head, labels);
    CHECK_THROWS_AS(kd::kd_total_loss(e, student, sh, labels), std::invalid_argument);
    CHECK_THROWS_AS(kd::kd_total_loss(h, kd::StudentOutputs{student_logits, {}}, sh, labels), std::invalid_argument);
  }
  SUBCASE("teacher parameters receive no gradient") {
    auto tw = Tensor::parameter({3, 4}, head.weight);
    auto tb = Tensor::parameter({3}, head.bias);
    const auto live_logits = ad::linear(zt, tw, tb);
    for (auto v : kd::all_variants()) {
      const auto crit = kd::KdCriterion::defaults(v);
      const auto signals = kd::make_teacher_signals(crit, zt, live_logits, head, labels);
      ad::backward(kd::kd_total_loss(crit, student, signals, labels).total);
    }
    CHECK_FALSE(tw.has_grad());
    CHECK_FALSE(tb.has_grad());
  }
}
