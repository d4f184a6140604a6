#include "kdlab/compression.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "kdlab/parallel.hpp"

namespace kdlab::compress {

using ad::Tensor;

void TrainConfig::validate() const {
  schedule.validate();
  criterion.validate();
  if (feature_dim == 0) throw std::invalid_argument("train config: feature_dim must be positive");
  for (auto h : hidden) {
    if (h == 0) throw std::invalid_argument("train config: hidden widths must be positive");
  }
}

std::string TrainConfig::describe() const {
  std::ostringstream os;
  os << "epochs=" << schedule.epochs << ";batch=" << schedule.batch_size << ";lr=" << io::format_double(schedule.lr)
     << ";momentum=" << io::format_double(schedule.momentum) << ";wd=" << io::format_double(schedule.weight_decay)
     << ";decay=" << io::format_double(schedule.decay_factor) << "@";
  for (double f : schedule.decay_at) os << io::format_double(f) << ',';
  os << ";seed=" << seed << ";variant=" << kd::to_string(criterion.variant)
     << ";lambda=" << io::format_double(criterion.lambda) << ";lambda_f=" << io::format_double(criterion.lambda_f)
     << ";lambda_l=" << io::format_double(criterion.lambda_l) << ";T=" << io::format_double(criterion.temperature)
     << ";hidden=";
  for (auto h : hidden) os << h << ',';
  os << ";feature_dim=" << feature_dim;
  return os.str();
}

TrainOutcome train(const TrainConfig& config, const data::Split& data, const nets::MultiHeadNet* teacher) {
  config.validate();
  const auto& crit = config.criterion;
  const bool distill = crit.variant != kd::Variant::None;
  if (distill && teacher == nullptr) {
    throw std::invalid_argument(kd::to_string(crit.variant) + " needs a teacher");
  }
  if (!distill && teacher != nullptr) throw std::invalid_argument("a teacher was given for vanilla training");
  const auto& train_set = data.train;
  if (train_set.size() == 0) throw std::invalid_argument("empty training set");

  const auto started = std::chrono::steady_clock::now();
  std::vector<std::size_t> widths{train_set.dim};
  widths.insert(widths.end(), config.hidden.begin(), config.hidden.end());
  widths.push_back(config.feature_dim);
  TrainOutcome out{nets::MultiHeadNet::init({widths, {train_set.classes}}, derive_seed(config.seed, 1)),
                   std::nullopt,
                   {}};
  auto& net = out.model;

  Tensor teacher_features, teacher_logits;
  kd::HeadParams teacher_head;
  if (teacher) {
    if (teacher->trunk().input_dim() != train_set.dim || teacher->head(0).classes() != train_set.classes) {
      throw std::invalid_argument("teacher does not match the dataset");
    }
    // The teacher is frozen and the data is fixed, so its signals are computed once.
    const auto fw = teacher->forward(train_set.all_features(), 0);
    teacher_features = ad::detach(fw.features);
    teacher_logits = ad::detach(fw.logits);
    teacher_head = kd::HeadParams::from(teacher->head(0));
    if (crit.uses_features()) {
      out.transform = nets::LinearTransform::create(config.feature_dim, teacher->trunk().feature_dim(),
                                                    derive_seed(config.seed, 2));
    }
  }

  auto params = net.parameters();
  if (out.transform) {
    for (auto& p : out.transform->parameters()) params.push_back(p);
  }
  SgdMomentum opt(params, config.schedule.momentum, config.schedule.weight_decay);

  auto& result = out.result;
  result.seed = config.seed;
  result.config_hash = io::hex_digest(io::fnv1a(config.describe()));
  bool first_step = true;
  for (std::size_t epoch = 0; epoch < config.schedule.epochs; ++epoch) {
    const double lr = config.schedule.lr_at(epoch);
    const auto batches = make_batches(train_set.size(), config.schedule.batch_size, derive_seed(config.seed, 100 + epoch));
    double loss_sum = 0.0, div_sum = 0.0;
    std::size_t correct = 0;
    for (const auto& idx : batches) {
      const Tensor x = train_set.batch(idx);
      const auto y = train_set.batch_labels(idx);
      const Tensor z = net.features(x);
      const Tensor logits = net.head_logits(z, 0);
      kd::StudentOutputs student{logits, out.transform ? (*out.transform)(z) : Tensor()};
      kd::TeacherSignals signals;
      if (teacher) {
        signals = kd::make_teacher_signals(crit, ad::select_rows(teacher_features, idx),
                                           ad::select_rows(teacher_logits, idx), teacher_head, y);
      }
      const auto terms = kd::kd_total_loss(crit, student, signals, y);
      const double loss = terms.total.item();
      if (!std::isfinite(loss)) result.all_losses_finite = false;
      if (first_step) {
        result.first_step_loss = loss;
        result.first_step_divergence = terms.divergence;
        first_step = false;
      }
      opt.zero_grad();
      ad::backward(terms.total);
      opt.step(lr);

      loss_sum += loss * static_cast<double>(idx.size());
      div_sum += terms.divergence * static_cast<double>(idx.size());
      const std::size_t k = logits.cols();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        correct += static_cast<int>(argmax(logits.values().subspan(r * k, k))) == y[r];
      }
    }
    const double n = static_cast<double>(train_set.size());
    result.epochs.push_back({epoch, lr, loss_sum / n, div_sum / n, static_cast<double>(correct) / n,
                             accuracy(net, data.test)});
  }
  result.final_test_accuracy = result.epochs.back().test_accuracy;
  result.final_train_accuracy = accuracy(net, train_set);
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return out;
}

TrainOutcome train_teacher(const Schedule& schedule, std::uint64_t seed, const std::vector<std::size_t>& hidden,
                           std::size_t feature_dim, const data::Split& data) {
  TrainConfig cfg;
  cfg.schedule = schedule;
  cfg.seed = seed;
  cfg.criterion = kd::KdCriterion::defaults(kd::Variant::None);
  cfg.hidden = hidden;
  cfg.feature_dim = feature_dim;
  return train(cfg, data, nullptr);
}

std::optional<double> rpr(double acc_kd, double base, double acc_teacher) {
  const double denom = acc_teacher - base;
  if (std::abs(denom) < 1e-9) return std::nullopt;
  return (acc_kd - base) / denom;
}

// ---------------------------------------------------------------------------
// raw records

io::CsvTable records_table(const std::vector<MetricRecord>& records) {
  io::CsvTable t{kRunsHeader, {}};
  for (const auto& r : records) {
    t.rows.push_back({r.run_id, r.variant, std::to_string(r.width), std::to_string(r.seed), r.split, r.metric,
                      io::format_double(r.value)});
  }
  return t;
}

std::vector<MetricRecord> records_from_table(const io::CsvTable& table) {
  if (table.header != kRunsHeader) throw std::runtime_error("runs csv: unexpected header");
  std::vector<MetricRecord> out;
  for (const auto& row : table.rows) {
    MetricRecord r;
    r.run_id = row[0];
    r.variant = row[1];
    r.width = std::stoull(row[2]);
    r.seed = std::stoull(row[3]);
    r.split = row[4];
    r.metric = row[5];
    r.value = std::stod(row[6]);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<MetricRecord> run_records(const std::string& run_id, const std::string& variant, std::size_t width,
                                      std::uint64_t seed, const RunResult& result) {
  const double final_loss = result.epochs.empty() ? 0.0 : result.epochs.back().train_loss;
  return {
      {run_id, variant, width, seed, "train", "accuracy", result.final_train_accuracy},
      {run_id, variant, width, seed, "train", "loss", final_loss},
      {run_id, variant, width, seed, "test", "accuracy", result.final_test_accuracy},
  };
}

// ---------------------------------------------------------------------------
// sweep

namespace {

std::string default_run_id(const TrainConfig& cfg, std::size_t width) {
  return io::hex_digest(io::fnv1a(cfg.describe() + ";width=" + std::to_string(width)));
}

struct Job {
  std::size_t width;
  std::uint64_t seed;
  kd::Variant variant;
};

}  // namespace

SweepResult width_sweep(const SweepConfig& config, const data::Split& data, const nets::MultiHeadNet& teacher,
                        double teacher_test_accuracy) {
  if (config.widths.empty() || config.seeds.empty()) throw std::invalid_argument("width_sweep: empty grid");
  std::vector<kd::Variant> run_variants{kd::Variant::None, kd::Variant::HintonKD};
  for (auto v : config.variants) {
    if (std::find(run_variants.begin(), run_variants.end(), v) == run_variants.end()) run_variants.push_back(v);
  }
  std::vector<Job> jobs;
  for (auto w : config.widths) {
    for (auto s : config.seeds) {
      for (auto v : run_variants) jobs.push_back({w, s, v});
    }
  }

  std::vector<TrainConfig> configs(jobs.size());
  std::vector<RunResult> results(jobs.size());
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    TrainConfig cfg = config.base;
    cfg.seed = jobs[i].seed;
    cfg.feature_dim = jobs[i].width;
    cfg.criterion = kd::KdCriterion::defaults(jobs[i].variant);
    cfg.criterion.lambda_f = config.base.criterion.lambda_f;
    cfg.criterion.lambda_l = config.base.criterion.lambda_l;
    cfg.criterion.temperature = config.base.criterion.temperature;
    if (auto it = config.lambdas.find(jobs[i].variant); it != config.lambdas.end()) cfg.criterion.lambda = it->second;
    configs[i] = cfg;
  }
  parallel_for(jobs.size(), config.workers, [&](std::size_t i) {
    const bool vanilla = jobs[i].variant == kd::Variant::None;
    results[i] = train(configs[i], data, vanilla ? nullptr : &teacher).result;
  });

  SweepResult out;
  out.records.push_back({io::hex_digest(io::fnv1a(nets::checkpoint_json(teacher))), "teacher",
                         teacher.trunk().feature_dim(), 0, "test", "accuracy", teacher_test_accuracy});
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const auto id = config.run_id ? config.run_id(jobs[i].variant, jobs[i].width, jobs[i].seed)
                                  : default_run_id(configs[i], jobs[i].width);
    auto recs = run_records(id, kd::to_string(jobs[i].variant), jobs[i].width, jobs[i].seed, results[i]);
    out.records.insert(out.records.end(), recs.begin(), recs.end());
  }
  out.rows = rpr_rows_from_records(out.records);
  return out;
}

std::vector<RprRow> rpr_rows_from_records(const std::vector<MetricRecord>& records) {
  std::optional<double> teacher_acc;
  double teacher_sum = 0.0;
  std::size_t teacher_n = 0;
  std::vector<std::string> variant_order;
  std::vector<std::size_t> widths;
  std::vector<std::uint64_t> seeds;
  std::map<std::tuple<std::string, std::size_t, std::uint64_t>, double> test_acc;
  for (const auto& r : records) {
    if (r.split != "test" || r.metric != "accuracy") continue;
    if (r.variant == "teacher") {
      teacher_sum += r.value;
      ++teacher_n;
      continue;
    }
    if (std::find(variant_order.begin(), variant_order.end(), r.variant) == variant_order.end()) {
      variant_order.push_back(r.variant);
    }
    if (std::find(widths.begin(), widths.end(), r.width) == widths.end()) widths.push_back(r.width);
    if (std::find(seeds.begin(), seeds.end(), r.seed) == seeds.end()) seeds.push_back(r.seed);
    test_acc[{r.variant, r.width, r.seed}] = r.value;
  }
  if (teacher_n == 0) throw std::runtime_error("rpr: no teacher accuracy in records");
  teacher_acc = teacher_sum / static_cast<double>(teacher_n);

  const std::string vanilla = kd::to_string(kd::Variant::None);
  const std::string hkd = kd::to_string(kd::Variant::HintonKD);
  std::vector<RprRow> rows;
  for (auto w : widths) {
    for (const auto& v : variant_order) {
      for (auto s : seeds) {
        auto it = test_acc.find({v, w, s});
        auto iv = test_acc.find({vanilla, w, s});
        auto ih = test_acc.find({hkd, w, s});
        if (it == test_acc.end() || iv == test_acc.end()) continue;
        RprRow row;
        row.variant = kd::parse_variant(v);
        row.width = w;
        row.seed = s;
        row.acc_kd = it->second;
        row.acc_vanilla = iv->second;
        row.acc_teacher = *teacher_acc;
        row.rpr_vanilla = rpr(row.acc_kd, row.acc_vanilla, row.acc_teacher);
        if (ih != test_acc.end()) {
          row.acc_hkd = ih->second;
          row.rpr_hkd = rpr(row.acc_kd, row.acc_hkd, row.acc_teacher);
        }
        rows.push_back(row);
      }
    }
  }
  return rows;
}

std::vector<SweepCell> summarize(const std::vector<RprRow>& rows) {
  struct Acc {
    std::vector<double> rpr;
    std::vector<double> acc;
  };
  std::vector<std::tuple<std::size_t, std::string, std::string>> order;
  std::map<std::tuple<std::size_t, std::string, std::string>, Acc> cells;
  for (const auto& r : rows) {
    if (r.variant == kd::Variant::None || r.variant == kd::Variant::HintonKD) continue;
    for (const char* base : {"vanilla", "hkd"}) {
      const auto& value = std::string(base) == "vanilla" ? r.rpr_vanilla : r.rpr_hkd;
      const auto key = std::make_tuple(r.width, kd::to_string(r.variant), std::string(base));
      if (!cells.count(key)) order.push_back(key);
      auto& c = cells[key];
      if (value) c.rpr.push_back(*value);
      c.acc.push_back(r.acc_kd);
    }
  }
  std::vector<SweepCell> out;
  for (const auto& key : order) {
    const auto& c = cells[key];
    SweepCell cell;
    cell.width = std::get<0>(key);
    cell.variant = std::get<1>(key);
    cell.base = std::get<2>(key);
    cell.count = c.rpr.size();
    if (!c.rpr.empty()) {
      double m = 0.0;
      for (double v : c.rpr) m += v;
      m /= static_cast<double>(c.rpr.size());
      double var = 0.0;
      for (double v : c.rpr) var += (v - m) * (v - m);
      cell.rpr_mean = m;
      cell.rpr_std = std::sqrt(var / static_cast<double>(c.rpr.size()));
    } else {
      cell.rpr_mean = std::nan("");
      cell.rpr_std = std::nan("");
    }
    double am = 0.0;
    for (double v : c.acc) am += v;
    cell.acc_mean = c.acc.empty() ? 0.0 : am / static_cast<double>(c.acc.size());
    out.push_back(cell);
  }
  std::stable_sort(out.begin(), out.end(), [](const SweepCell& a, const SweepCell& b) { return a.width < b.width; });
  return out;
}

io::CsvTable plot_table(const std::vector<SweepCell>& cells) {
  io::CsvTable t{{"width", "variant", "rpr_mean", "rpr_std", "base"}, {}};
  for (const auto& c : cells) {
    t.rows.push_back(
        {std::to_string(c.width), c.variant, io::format_double(c.rpr_mean), io::format_double(c.rpr_std), c.base});
  }
  return t;
}

// ---------------------------------------------------------------------------
// hyperparameters

std::map<kd::Variant, double> hyperparam_protocol(const std::vector<TuningPair>& pairs,
                                                  const std::vector<kd::Variant>& variants,
                                                  const std::vector<double>& grid, const PairEvaluator& evaluate) {
  std::map<kd::Variant, double> chosen;
  for (auto v : variants) chosen[v] = kd::KdCriterion::defaults(v).lambda;
  if (grid.empty()) return chosen;

  const TuningPair* tuning = nullptr;
  for (const auto& p : pairs) {
    if (!p.tuning) continue;
    if (tuning) throw std::invalid_argument("hyperparam_protocol: more than one tuning pair");
    tuning = &p;
  }
  if (!tuning) throw std::invalid_argument("hyperparam_protocol: no pair is flagged for tuning");

  std::vector<double> sorted(grid);
  std::sort(sorted.begin(), sorted.end());
  for (auto v : variants) {
    double best_lambda = sorted.front();
    double best_score = -std::numeric_limits<double>::infinity();
    for (double lambda : sorted) {
      const double score = evaluate(*tuning, v, lambda);
      if (score > best_score) {
        best_score = score;
        best_lambda = lambda;
      }
    }
    chosen[v] = best_lambda;
  }
  return chosen;
}

}  // namespace kdlab::compress
