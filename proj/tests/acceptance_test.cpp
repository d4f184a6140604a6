// One line per acceptance criterion; exit status 1 if any fails.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gradcheck.hpp"
#include "kdlab/compression.hpp"
#include "kdlab/experiment.hpp"
#include "kdlab/incremental.hpp"
#include "kdlab/kd_criteria.hpp"
#include "kdlab/theory_verify.hpp"

using namespace kdlab;
namespace fs = std::filesystem;
using nlohmann::json;
using ad::Tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " FAILED(" << what << ")";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("kdlab_acceptance_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// Shipped config with its output directory redirected.
fs::path redirected_config(const std::string& name, const fs::path& out) {
  auto j = json::parse(io::read_file(fs::path(KDLAB_SOURCE_DIR) / "configs" / name));
  j["output_dir"] = out.string();
  const auto p = out.parent_path() / ("config_" + name);
  io::atomic_write(p, j.dump(2));
  return p;
}

int run_cli(const std::string& args) {
  const int raw = std::system((std::string(KDLAB_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

// ---------------------------------------------------------------------------

Outcome theory_suite() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<theory::VerificationReport> reports = theory::run_all(0);
  // The stated envelopes: dim <= 16, k <= 10 for the first-order term; dims <= 8 for the Fisher identity.
  reports.push_back(theory::check_first_order_zero(16, 10, 100, 11));
  reports.push_back(theory::check_first_order_zero(2, 2, 100, 12));
  reports.push_back(theory::check_fisher_neg_hessian(8, 5, 20, 13));
  reports.push_back(theory::check_fisher_neg_hessian(2, 2, 20, 14));
  for (std::size_t k : {2, 5, 10}) reports.push_back(theory::check_lh_hessian_identity(k, 15));
  const double secs = seconds_since(t0);
  for (const auto& r : reports) {
    o.require(r.passed, r.name);
    o.detail << " " << r.name << "=" << (r.slope ? "slope " + fmt(*r.slope, 3) : "res " + io::format_double(r.max_residual));
    if (r.name.find("first") != std::string::npos) o.require(r.max_residual < 1e-9, "first-order < 1e-9");
    if (r.name.find("fisher") != std::string::npos) o.require(r.max_residual < 1e-5, "fisher < 1e-5");
    if (r.name.find("lh") != std::string::npos) o.require(r.max_residual < 1e-7, "lh < 1e-7");
    if (r.slope) o.require(*r.slope >= 2.5 && *r.slope <= 3.5, "slope in [2.5, 3.5]");
  }
  o.require(secs < 30.0, "runtime < 30 s");
  o.detail << " (" << fmt(secs, 2) << " s)";
  return o;
}

Outcome autodiff_gradcheck() {
  Outcome o;
  std::mt19937_64 rng(2024);
  const int labels[] = {1, 0, 3};
  const std::size_t pick[] = {2, 0, 2};
  auto contract = [](const Tensor& y, std::uint64_t seed) {
    std::mt19937_64 r(seed);
    return ad::sum(ad::mul(y, Tensor::constant(y.shape(), testing::uniform(y.size(), r))));
  };
  using F = std::function<Tensor(const std::vector<Tensor>&)>;
  const std::vector<std::tuple<std::string, F, std::vector<ad::Shape>>> ops = {
      {"matmul", [&](const auto& in) { return contract(ad::matmul(in[0], in[1]), 1); }, {{3, 4}, {4, 2}}},
      {"linear", [&](const auto& in) { return contract(ad::linear(in[0], in[1], in[2]), 2); }, {{3, 4}, {2, 4}, {2}}},
      {"add", [&](const auto& in) { return contract(ad::add(in[0], in[1]), 3); }, {{3, 4}, {3, 4}}},
      {"sub", [&](const auto& in) { return contract(ad::sub(in[0], in[1]), 4); }, {{3, 4}, {3, 4}}},
      {"mul", [&](const auto& in) { return contract(ad::mul(in[0], in[1]), 5); }, {{3, 4}, {3, 4}}},
      {"add_bias", [&](const auto& in) { return contract(ad::add_bias(in[0], in[1]), 6); }, {{3, 4}, {4}}},
      {"scale", [&](const auto& in) { return contract(ad::scale(in[0], 0.7), 7); }, {{3, 4}}},
      {"relu", [&](const auto& in) { return contract(ad::relu(in[0]), 8); }, {{3, 4}}},
      {"square", [&](const auto& in) { return contract(ad::square(in[0]), 9); }, {{3, 4}}},
      {"sum", [&](const auto& in) { return ad::sum(ad::square(in[0])); }, {{3, 4}}},
      {"mean", [&](const auto& in) { return ad::mean(ad::square(in[0])); }, {{3, 4}}},
      {"log_softmax", [&](const auto& in) { return contract(ad::log_softmax(in[0]), 10); }, {{3, 4}}},
      {"softmax", [&](const auto& in) { return contract(ad::softmax(in[0]), 11); }, {{3, 4}}},
      {"normalize_rows", [&](const auto& in) { return contract(ad::normalize_rows(in[0]), 12); }, {{3, 4}}},
      {"softmax_cross_entropy", [&](const auto& in) { return ad::softmax_cross_entropy(in[0], labels); }, {{3, 4}}},
      {"select_rows", [&](const auto& in) { return contract(ad::select_rows(in[0], pick), 13); }, {{3, 4}}},
      {"mlp3",
       [&](const auto& in) {
         static const auto x = [] {
           std::mt19937_64 r(99);
           return Tensor::constant({3, 5}, testing::uniform(15, r));
         }();
         const auto h1 = ad::relu(ad::linear(x, in[0], in[1]));
         const auto h2 = ad::relu(ad::linear(h1, in[2], in[3]));
         return ad::softmax_cross_entropy(ad::linear(h2, in[4], in[5]), labels);
       },
       {{6, 5}, {6}, {5, 6}, {5}, {4, 5}, {4}}},
  };
  double overall = 0.0;
  for (const auto& [name, f, shapes] : ops) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<Tensor> in;
      for (const auto& s : shapes) in.push_back(testing::random_param(s, rng));
      worst = std::max(worst, testing::gradcheck(f, in));
    }
    o.require(worst < 1e-4, name);
    overall = std::max(overall, worst);
  }
  o.detail << " " << ops.size() << " checks x 100 trials, worst rel err " << io::format_double(overall);
  return o;
}

Outcome exact_algebra() {
  Outcome o;
  std::mt19937_64 rng(7);
  double se_gap = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto a = testing::uniform(20, rng), b = testing::uniform(20, rng);
    double se = 0.0;
    for (std::size_t j = 0; j < 20; ++j) se += (a[j] - b[j]) * (a[j] - b[j]);
    const double dg = kd::d_g(Tensor::constant({4, 5}, a), Tensor::constant({4, 5}, b), kd::WeightDiag::identity(5)).item();
    se_gap = std::max(se_gap, std::abs(dg - se / 4));
  }
  o.require(se_gap < 1e-12, "d_g(w=1) == SE");

  double mean_gap = 0.0, var_gap = 0.0;
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = 2 + i % 40;
    const auto raw = testing::uniform(n, rng, 0.0, 3.0);
    double mu = 0, var = 0;
    for (double v : raw) mu += v / n;
    for (double v : raw) var += (v - mu) * (v - mu) / n;
    // Pre-clamp values, and the function output when nothing is clamped.
    std::vector<double> pre(n);
    for (std::size_t j = 0; j < n; ++j) pre[j] = (raw[j] - mu) / std::sqrt(var) + 1.0;
    const auto w = kd::normalize_weight_diag({raw, kd::WeightSource::LogitMagnitude});
    const auto& vals = w.clamp_fraction == 0.0 ? w.w : pre;
    double m = 0, v = 0;
    for (double x : vals) m += x / n;
    for (double x : vals) v += (x - m) * (x - m) / n;
    mean_gap = std::max(mean_gap, std::abs(m - 1.0));
    var_gap = std::max(var_gap, std::abs(v - 1.0));
  }
  o.require(mean_gap < 1e-9, "normalized mean 1");
  o.require(var_gap < 1e-6, "normalized variance 1");

  bool rpr_exact = true;
  for (double t : {0.9, 0.77, 0.61})
    for (double b : {0.1, 0.33, 0.6}) rpr_exact &= *compress::rpr(t, b, t) == 1.0 && *compress::rpr(b, b, t) == 0.0;
  o.require(rpr_exact, "RPR endpoints");

  // lambda = 0 criteria against vanilla, compression and incremental.
  const auto split = data::prepare_splits(data::make_blob_mixture(4, 2, 4, 20, 2.0, 3), 0.6, 1);
  compress::TrainConfig cfg;
  cfg.schedule.epochs = 4;
  cfg.hidden = {16};
  cfg.feature_dim = 8;
  const auto teacher = compress::train_teacher(cfg.schedule, 9, {32}, 16, split).model.frozen_copy();
  const auto vanilla = compress::train(cfg, split, nullptr);
  bool identical = true;
  for (auto v : kd::all_variants()) {
    if (v == kd::Variant::None) continue;
    auto c = cfg;
    c.criterion = kd::KdCriterion::defaults(v);
    c.criterion.lambda = 0.0;
    identical &= compress::train(c, split, &teacher).model.bitwise_equal(vanilla.model);
  }
  const auto curriculum = il::split_tasks(split, 2);
  il::IlConfig ic;
  ic.schedule.epochs = 4;
  ic.hidden = {16};
  ic.feature_dim = 8;
  const auto il_vanilla = il::il_train(curriculum, il::Method::Vanilla, 0.0, ic);
  for (auto m : il::all_methods()) {
    if (m == il::Method::OfflineJoint) continue;
    const auto r = il::il_train(curriculum, m, 0.0, ic);
    for (std::size_t i = 0; i < r.accuracy.size(); ++i) identical &= r.accuracy[i].accuracy == il_vanilla.accuracy[i].accuracy;
  }
  o.require(identical, "lambda = 0 trajectories");
  o.detail << " SE gap " << io::format_double(se_gap) << ", mean gap " << io::format_double(mean_gap)
           << ", var gap " << io::format_double(var_gap) << ", RPR endpoints exact, lambda=0 bit-identical";
  return o;
}

Outcome compression_trend(const fs::path& out) {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg_path = redirected_config("compression.json", out);
  const auto spec = exp::parse_config(cfg_path);
  std::ostringstream log;
  exp::cmd_sweep_width(spec, log);
  const double secs = seconds_since(t0);

  const auto summary = json::parse(io::read_file(out / "summary.json"));
  const auto lambdas = json::parse(io::read_file(out / "sweep_lambdas.json"));
  const double teacher = summary["teacher_accuracy"].get<double>();
  std::map<std::size_t, std::map<std::string, double>> acc;
  for (const auto& a : summary["accuracy"]) acc[a["width"].get<std::size_t>()][a["variant"].get<std::string>()] = a["mean"];
  std::map<std::size_t, std::map<std::string, double>> rpr;
  for (const auto& c : summary["cells"])
    if (c["base"] == "vanilla" && c["rpr_mean"].is_number())
      rpr[c["width"].get<std::size_t>()][c["variant"].get<std::string>()] = c["rpr_mean"];

  const std::size_t gate_width = spec.student.feature_dim;
  o.require(acc.count(gate_width) > 0, "gate width present");
  const auto& at = acc[gate_width];
  const double vanilla = at.at("vanilla");
  for (const auto& [variant, mean] : at) {
    if (variant == "vanilla") continue;
    o.require(mean >= vanilla, variant + " >= vanilla");
  }
  const double logits_rpr = rpr[gate_width]["LogitsSE"];
  o.require(logits_rpr > 0.1, "LogitsSE RPR > 0.1");
  o.require(secs < 900.0, "runtime < 15 min");

  o.detail << " teacher " << fmt(teacher) << "; F=" << gate_width << ": vanilla " << fmt(vanilla);
  for (const auto& [variant, mean] : at)
    if (variant != "vanilla") o.detail << ", " << variant << " " << fmt(mean);
  o.detail << "; LogitsSE RPR " << fmt(logits_rpr) << "; lambdas " << lambdas.dump();
  // Reported only: logits > weighted features > plain features at each width.
  for (const auto& [width, cells] : rpr) {
    const double l = cells.count("LogitsSE") ? cells.at("LogitsSE") : NAN;
    double wf = -1e9;
    for (const char* v : {"WeightedEFeaturesSE", "WeightedHFeaturesSE"})
      if (cells.count(v)) wf = std::max(wf, cells.at(v));
    const double f = cells.count("FeaturesSE") ? cells.at("FeaturesSE") : NAN;
    o.detail << "; [report] F=" << width << " RPR L " << fmt(l, 3) << " WF " << fmt(wf, 3) << " F " << fmt(f, 3)
             << (l > wf && wf > f ? " (L>WF>F holds)" : " (L>WF>F breaks)");
  }
  o.detail << " (" << fmt(secs, 1) << " s)";
  return o;
}

Outcome incremental_trend(const fs::path& out) {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg_path = redirected_config("incremental.json", out);
  const auto spec = exp::parse_config(cfg_path);
  std::ostringstream log;
  exp::cmd_incremental(spec, "", log);
  const double secs = seconds_since(t0);

  const auto summary = json::parse(io::read_file(out / "incremental_summary.json"));
  const auto lambdas = json::parse(io::read_file(out / "incremental_lambdas.json"));
  std::map<std::string, json> by;
  for (const auto& m : summary["methods"]) by[m["method"].get<std::string>()] = m;
  auto avg = [&](const std::string& m) { return by.at(m)["final_average"]["mean"].get<double>(); };

  const double vanilla = avg("vanilla");
  const double forgetting = by.at("vanilla")["forgetting_first_task"]["mean"].get<double>();
  o.require(spec.incremental.tasks == 5 && spec.seeds.size() == 3, "5 tasks, 3 seeds");
  o.require(forgetting >= 0.20, "vanilla first-task drop >= 20 points");
  o.require(avg("LogitsSE") >= vanilla + 0.05, "LogitsSE >= vanilla + 5");
  o.require(avg("EWC") >= vanilla + 0.05, "EWC >= vanilla + 5");
  o.require(secs < 900.0, "runtime < 15 min");

  o.detail << " vanilla " << fmt(vanilla) << " (first-task drop " << fmt(forgetting) << ")";
  for (const auto& [name, m] : by)
    if (name != "vanilla") o.detail << ", " << name << " " << fmt(avg(name));
  double f = -1, p = -1;
  for (const char* m : {"WeightedHFeaturesSE", "FeaturesSE"}) f = std::max(f, avg(m));
  for (const char* m : {"EWC", "SI", "MAS", "L2"}) p = std::max(p, avg(m));
  const double l = avg("LogitsSE");
  o.detail << "; [report] best L " << fmt(l) << ", F " << fmt(f) << ", P " << fmt(p)
           << (l > f && f > p ? " (L>F>P holds)" : " (L>F>P breaks)") << "; lambdas " << lambdas.dump() << " ("
           << fmt(secs, 1) << " s)";
  return o;
}

Outcome determinism(const fs::path& compression_out, const fs::path& incremental_out) {
  Outcome o;
  const auto ccfg = compression_out.parent_path() / "config_compression.json";
  const auto icfg = incremental_out.parent_path() / "config_incremental.json";
  for (const std::string v : {"LogitsSE", "WeightedEFeaturesSE"}) {
    o.require(run_cli("distill -c " + ccfg.string() + " --variant " + v) == 0, "distill " + v);
    const auto a = io::read_file(compression_out / ("distill_" + v + ".csv"));
    const auto ae = io::read_file(compression_out / ("distill_" + v + "_epochs.csv"));
    o.require(run_cli("distill -c " + ccfg.string() + " --variant " + v) == 0, "distill " + v);
    o.require(io::read_file(compression_out / ("distill_" + v + ".csv")) == a, "distill " + v + " bytes");
    o.require(io::read_file(compression_out / ("distill_" + v + "_epochs.csv")) == ae, "distill " + v + " epoch bytes");
  }
  // Fresh processes must reproduce the files written in-process above.
  for (const std::string m : {"LogitsSE", "EWC", "SI"}) {
    const auto before = io::read_file(incremental_out / ("incremental_" + m + ".csv"));
    o.require(run_cli("incremental -c " + icfg.string() + " --method " + m) == 0, "incremental " + m);
    o.require(io::read_file(incremental_out / ("incremental_" + m + ".csv")) == before, "incremental " + m + " bytes");
  }
  o.detail << " distill {LogitsSE, WeightedEFeaturesSE} x2 and incremental {LogitsSE, EWC, SI} re-runs byte-identical";
  return o;
}

}  // namespace

int main() {
  const auto root = scratch("runs");
  const auto cout_line = [](int id, const std::string& name, const Outcome& o) {
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " " << name << ":" << o.detail.str() << std::endl;
    return o.pass;
  };
  auto guarded = [](const std::function<Outcome()>& f) {
    try {
      return f();
    } catch (const std::exception& e) {
      Outcome o;
      o.require(false, std::string("exception: ") + e.what());
      return o;
    }
  };
  bool ok = true;
  ok &= cout_line(1, "theory suite", guarded(theory_suite));
  ok &= cout_line(2, "autodiff gradcheck", guarded(autodiff_gradcheck));
  ok &= cout_line(3, "exact algebraic checks", guarded(exact_algebra));
  ok &= cout_line(4, "compression trend", guarded([&] { return compression_trend(root / "compression"); }));
  ok &= cout_line(5, "incremental trend", guarded([&] { return incremental_trend(root / "incremental"); }));
  ok &= cout_line(6, "determinism",
                  guarded([&] { return determinism(root / "compression", root / "incremental"); }));
  std::cout << (ok ? "ALL CRITERIA PASS" : "SOME CRITERIA FAIL") << std::endl;
  return ok ? 0 : 1;
}
