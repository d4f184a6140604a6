#include "kdlab/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "kdlab/parallel.hpp"
#include "kdlab/rng.hpp"
#include "kdlab/theory_verify.hpp"

namespace kdlab::exp {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// config reading

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw ConfigError((path.empty() ? std::string("config") : path) + ": " + what);
}

std::string got(const json& j) { return std::string(", got ") + j.type_name(); }

void read(const json& j, const std::string& path, std::uint64_t& out) {
  if (j.is_number_unsigned()) {
    out = j.get<std::uint64_t>();
  } else if (j.is_number_integer()) {
    fail(path, "expected a nonnegative integer, got " + j.dump());
  } else {
    fail(path, "expected a nonnegative integer" + got(j));
  }
}

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "size_t and uint64_t share one reader");

void read(const json& j, const std::string& path, double& out) {
  if (!j.is_number()) fail(path, "expected a number" + got(j));
  out = j.get<double>();
}

void read(const json& j, const std::string& path, std::string& out) {
  if (!j.is_string()) fail(path, "expected a string" + got(j));
  out = j.get<std::string>();
}

template <class T>
void read(const json& j, const std::string& path, std::vector<T>& out) {
  if (!j.is_array()) fail(path, "expected an array" + got(j));
  out.clear();
  for (std::size_t i = 0; i < j.size(); ++i) {
    T v{};
    read(j[i], path + "[" + std::to_string(i) + "]", v);
    out.push_back(std::move(v));
  }
}

template <class T>
void read(const json& j, const std::string& path, std::map<std::string, T>& out) {
  if (!j.is_object()) fail(path, "expected an object" + got(j));
  out.clear();
  for (const auto& [k, v] : j.items()) read(v, path + "." + k, out[k]);
}

void read(const json& j, const std::string& path, Schedule& out);

template <class T>
void read(const json& j, const std::string& path, std::optional<T>& out) {
  if (j.is_null()) {
    out.reset();
    return;
  }
  T v{};
  read(j, path, v);
  out = std::move(v);
}

// Reads the keys of one JSON object and rejects any key it was not asked for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_, "expected an object" + got(j_));
  }

  template <class T>
  void get(const char* key, T& out) {
    allowed_.insert(key);
    if (auto it = j_.find(key); it != j_.end()) read(*it, child(key), out);
  }

  template <class T>
  void require(const char* key, T& out) {
    if (!j_.contains(key)) fail(child(key), "required field is missing");
    get(key, out);
  }

  // Nested object, or nullptr when absent.
  const json* object(const char* key) {
    allowed_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!allowed_.count(k)) fail(child(k), "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> allowed_;
};

void read(const json& j, const std::string& path, Schedule& out) {
  ObjectReader r(j, path);
  r.get("epochs", out.epochs);
  r.get("batch_size", out.batch_size);
  r.get("lr", out.lr);
  r.get("momentum", out.momentum);
  r.get("weight_decay", out.weight_decay);
  r.get("decay_factor", out.decay_factor);
  r.get("decay_at", out.decay_at);
  r.finish();
  try {
    out.validate();
  } catch (const std::invalid_argument& e) {
    fail(path, e.what());
  }
}

json schedule_json(const Schedule& s) {
  return {{"epochs", s.epochs},         {"batch_size", s.batch_size},     {"lr", s.lr},
          {"momentum", s.momentum},     {"weight_decay", s.weight_decay}, {"decay_factor", s.decay_factor},
          {"decay_at", s.decay_at}};
}

json optional_schedule_json(const std::optional<Schedule>& s) { return s ? schedule_json(*s) : json(nullptr); }

void check(bool ok, const std::string& path, const std::string& what) {
  if (!ok) fail(path, what);
}

void validate(const ExperimentSpec& spec) {
  const auto& d = spec.dataset;
  check(d.kind == "blobs" || d.kind == "idx", "dataset.kind", "must be \"blobs\" or \"idx\"");
  if (d.kind == "blobs") {
    check(d.classes >= 2, "dataset.classes", "must be >= 2");
    check(d.clusters_per_class >= 1, "dataset.clusters_per_class", "must be >= 1");
    check(d.dim >= 1, "dataset.dim", "must be >= 1");
    check(d.n_per_cluster >= 1, "dataset.n_per_cluster", "must be >= 1");
    check(d.separation > 0.0, "dataset.separation", "must be positive");
    check(d.sigma > 0.0, "dataset.sigma", "must be positive");
  } else {
    check(!d.images.empty(), "dataset.images", "required for idx datasets");
    check(!d.labels.empty(), "dataset.labels", "required for idx datasets");
  }
  check(d.train_fraction > 0.0 && d.train_fraction < 1.0, "dataset.train_fraction", "must be in (0, 1)");
  check(!spec.output_dir.empty(), "output_dir", "must not be empty");
  check(!spec.seeds.empty(), "seeds", "must not be empty");
  check(spec.teacher.feature_dim >= 1, "teacher.feature_dim", "must be >= 1");
  check(spec.student.feature_dim >= 1, "student.feature_dim", "must be >= 1");
  for (auto h : spec.teacher.hidden) check(h >= 1, "teacher.hidden", "widths must be >= 1");
  for (auto h : spec.student.hidden) check(h >= 1, "student.hidden", "widths must be >= 1");
  check(spec.criterion.temperature > 0.0, "criterion.temperature", "must be positive");
  check(spec.criterion.lambda_f >= 0.0, "criterion.lambda_f", "must be nonnegative");
  check(spec.criterion.lambda_l >= 0.0, "criterion.lambda_l", "must be nonnegative");
  check(!spec.criterion.lambda || *spec.criterion.lambda >= 0.0, "criterion.lambda", "must be nonnegative");

  for (auto w : spec.sweep.widths) check(w >= 1, "sweep.widths", "widths must be >= 1");
  check(spec.sweep.tuning_width >= 1, "sweep.tuning_width", "must be >= 1");
  auto check_variant = [](const std::string& name, const std::string& path) {
    try {
      kd::parse_variant(name);
    } catch (const std::invalid_argument& e) {
      fail(path, e.what());
    }
  };
  for (std::size_t i = 0; i < spec.sweep.variants.size(); ++i) {
    check_variant(spec.sweep.variants[i], "sweep.variants[" + std::to_string(i) + "]");
  }
  for (const auto& [k, v] : spec.sweep.lambdas) {
    check_variant(k, "sweep.lambdas." + k);
    check(v >= 0.0, "sweep.lambdas." + k, "must be nonnegative");
  }
  for (double v : spec.sweep.lambda_grid) check(v >= 0.0, "sweep.lambda_grid", "values must be nonnegative");

  const auto& inc = spec.incremental;
  check(inc.tasks >= 1, "incremental.tasks", "must be >= 1");
  check(inc.data_fraction > 0.0 && inc.data_fraction <= 1.0, "incremental.data_fraction", "must be in (0, 1]");
  check(inc.si_xi > 0.0, "incremental.si_xi", "must be positive");
  auto check_method = [](const std::string& name, const std::string& path) {
    try {
      il::parse_method(name);
    } catch (const std::invalid_argument& e) {
      fail(path, e.what());
    }
  };
  for (std::size_t i = 0; i < inc.methods.size(); ++i) {
    check_method(inc.methods[i], "incremental.methods[" + std::to_string(i) + "]");
  }
  for (const auto& [k, v] : inc.lambdas) {
    check_method(k, "incremental.lambdas." + k);
    check(v >= 0.0, "incremental.lambdas." + k, "must be nonnegative");
  }
  for (const auto& [k, grid] : inc.lambda_grids) {
    check_method(k, "incremental.lambda_grids." + k);
    check(!grid.empty(), "incremental.lambda_grids." + k, "must not be empty");
  }
}

}  // namespace

ExperimentSpec parse_config_text(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, column = 1;
    const std::size_t end = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    for (std::size_t i = 0; i < end; ++i) {
      if (text[i] == '\n') {
        ++line;
        column = 1;
      } else {
        ++column;
      }
    }
    throw ConfigError("config: parse error at line " + std::to_string(line) + ", column " + std::to_string(column) +
                      ": " + e.what());
  }

  ExperimentSpec spec;
  ObjectReader r(root, "");
  r.require("output_dir", spec.output_dir);
  r.get("seeds", spec.seeds);
  r.get("schedule", spec.schedule);
  if (const json* j = r.object("dataset")) {
    auto& d = spec.dataset;
    ObjectReader o(*j, "dataset");
    o.get("kind", d.kind);
    o.get("classes", d.classes);
    o.get("clusters_per_class", d.clusters_per_class);
    o.get("dim", d.dim);
    o.get("n_per_cluster", d.n_per_cluster);
    o.get("separation", d.separation);
    o.get("sigma", d.sigma);
    o.get("seed", d.seed);
    o.get("train_fraction", d.train_fraction);
    o.get("images", d.images);
    o.get("labels", d.labels);
    o.get("subsample", d.subsample);
    o.finish();
  }
  if (const json* j = r.object("teacher")) {
    auto& t = spec.teacher;
    ObjectReader o(*j, "teacher");
    o.get("hidden", t.hidden);
    o.get("feature_dim", t.feature_dim);
    o.get("seed", t.seed);
    o.get("schedule", t.schedule);
    o.get("checkpoint", t.checkpoint);
    o.finish();
  }
  if (const json* j = r.object("student")) {
    ObjectReader o(*j, "student");
    o.get("hidden", spec.student.hidden);
    o.get("feature_dim", spec.student.feature_dim);
    o.finish();
  }
  if (const json* j = r.object("criterion")) {
    auto& c = spec.criterion;
    ObjectReader o(*j, "criterion");
    o.get("lambda", c.lambda);
    o.get("lambda_f", c.lambda_f);
    o.get("lambda_l", c.lambda_l);
    o.get("temperature", c.temperature);
    o.finish();
  }
  if (const json* j = r.object("sweep")) {
    auto& s = spec.sweep;
    ObjectReader o(*j, "sweep");
    o.get("widths", s.widths);
    o.get("variants", s.variants);
    o.get("lambdas", s.lambdas);
    o.get("lambda_grid", s.lambda_grid);
    o.get("tuning_width", s.tuning_width);
    o.finish();
  }
  if (const json* j = r.object("incremental")) {
    auto& s = spec.incremental;
    ObjectReader o(*j, "incremental");
    o.get("tasks", s.tasks);
    o.get("class_shuffle_seed", s.class_shuffle_seed);
    o.get("methods", s.methods);
    o.get("lambdas", s.lambdas);
    o.get("lambda_grids", s.lambda_grids);
    o.get("data_fraction", s.data_fraction);
    o.get("si_xi", s.si_xi);
    o.get("schedule", s.schedule);
    o.finish();
  }
  r.finish();
  validate(spec);
  return spec;
}

ExperimentSpec parse_config(const fs::path& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError("config: cannot read " + path.string());
  }
  return parse_config_text(text);
}

json ExperimentSpec::to_json() const {
  json j;
  j["output_dir"] = output_dir;
  j["seeds"] = seeds;
  j["schedule"] = schedule_json(schedule);
  j["dataset"] = {{"kind", dataset.kind},
                  {"classes", dataset.classes},
                  {"clusters_per_class", dataset.clusters_per_class},
                  {"dim", dataset.dim},
                  {"n_per_cluster", dataset.n_per_cluster},
                  {"separation", dataset.separation},
                  {"sigma", dataset.sigma},
                  {"seed", dataset.seed},
                  {"train_fraction", dataset.train_fraction},
                  {"images", dataset.images},
                  {"labels", dataset.labels},
                  {"subsample", dataset.subsample}};
  j["teacher"] = {{"hidden", teacher.hidden},
                  {"feature_dim", teacher.feature_dim},
                  {"seed", teacher.seed},
                  {"schedule", optional_schedule_json(teacher.schedule)},
                  {"checkpoint", teacher.checkpoint}};
  j["student"] = {{"hidden", student.hidden}, {"feature_dim", student.feature_dim}};
  j["criterion"] = {{"lambda", criterion.lambda ? json(*criterion.lambda) : json(nullptr)},
                    {"lambda_f", criterion.lambda_f},
                    {"lambda_l", criterion.lambda_l},
                    {"temperature", criterion.temperature}};
  j["sweep"] = {{"widths", sweep.widths},
                {"variants", sweep.variants},
                {"lambdas", sweep.lambdas},
                {"lambda_grid", sweep.lambda_grid},
                {"tuning_width", sweep.tuning_width}};
  j["incremental"] = {
      {"tasks", incremental.tasks},
      {"class_shuffle_seed",
       incremental.class_shuffle_seed ? json(*incremental.class_shuffle_seed) : json(nullptr)},
      {"methods", incremental.methods},
      {"lambdas", incremental.lambdas},
      {"lambda_grids", incremental.lambda_grids},
      {"data_fraction", incremental.data_fraction},
      {"si_xi", incremental.si_xi},
      {"schedule", optional_schedule_json(incremental.schedule)}};
  return j;
}

double default_il_lambda(il::Method m) {
  switch (m) {
    case il::Method::LogitsSE: return 0.1;
    case il::Method::WeightedHFeaturesSE: return 0.1;
    case il::Method::FeaturesSE: return 0.1;
    case il::Method::EWC: return 100.0;
    case il::Method::SI: return 10.0;
    case il::Method::MAS: return 1.0;
    case il::Method::L2: return 1.0;
    case il::Method::Vanilla:
    case il::Method::OfflineJoint: return 0.0;
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// data and ids

data::Split load_data(const DatasetSpec& spec) {
  data::Dataset ds;
  if (spec.kind == "blobs") {
    ds = data::make_blob_mixture(spec.classes, spec.clusters_per_class, spec.dim, spec.n_per_cluster, spec.separation,
                                 spec.seed, spec.sigma);
  } else {
    ds = data::load_idx(spec.images, spec.labels);
    if (spec.subsample > 0 && spec.subsample < ds.size()) ds = data::subsample(ds, spec.subsample, derive_seed(spec.seed, 3));
  }
  return data::prepare_splits(ds, spec.train_fraction, derive_seed(spec.seed, 1));
}

std::string run_id(const ExperimentSpec& spec, std::uint64_t seed, const std::string& tag) {
  return io::hex_digest(
      io::fnv1a(spec.to_json().dump() + "|" + std::to_string(seed) + "|" + kCodeVersion + "|" + tag));
}

namespace {

fs::path output_dir(const ExperimentSpec& spec) {
  fs::path dir(spec.output_dir);
  fs::create_directories(dir);
  io::atomic_write(dir / "config.resolved.json", spec.to_json().dump(2) + "\n");
  return dir;
}

void write_csv(const fs::path& path, const io::CsvTable& table) { io::atomic_write(path, io::csv_text(table)); }
void write_json(const fs::path& path, const json& j) { io::atomic_write(path, j.dump(2) + "\n"); }

Schedule teacher_schedule(const ExperimentSpec& spec) { return spec.teacher.schedule.value_or(spec.schedule); }

// The teacher depends only on the data, its own widths and its schedule.
std::string teacher_run_id(const ExperimentSpec& spec) {
  const json j = spec.to_json();
  const json key = {{"dataset", j["dataset"]}, {"teacher", j["teacher"]}, {"schedule", schedule_json(teacher_schedule(spec))}};
  return io::hex_digest(io::fnv1a(key.dump() + "|" + kCodeVersion + "|teacher"));
}

struct TeacherHandle {
  nets::MultiHeadNet model;
  double test_accuracy = 0.0;
};

TeacherHandle train_and_save_teacher(const ExperimentSpec& spec, const data::Split& split, const fs::path& dir,
                                     std::ostream& log) {
  const auto& t = spec.teacher;
  auto outcome = compress::train_teacher(teacher_schedule(spec), t.seed, t.hidden, t.feature_dim, split);
  const auto id = teacher_run_id(spec);
  nets::save_checkpoint(outcome.model, dir / "teacher.json");
  write_csv(dir / "teacher.csv",
            compress::records_table(compress::run_records(id, "teacher", t.feature_dim, t.seed, outcome.result)));
  log << "teacher " << id << ": test accuracy " << io::format_double(outcome.result.final_test_accuracy) << "\n";
  return {outcome.model.frozen_copy(), outcome.result.final_test_accuracy};
}

TeacherHandle obtain_teacher(const ExperimentSpec& spec, const data::Split& split, const fs::path& dir,
                             std::ostream& log) {
  TeacherHandle h;
  if (!spec.teacher.checkpoint.empty()) {
    h.model = nets::load_checkpoint(spec.teacher.checkpoint);
  } else {
    bool reuse = false;
    if (fs::exists(dir / "teacher.json") && fs::exists(dir / "teacher.csv")) {
      const auto table = io::read_csv(dir / "teacher.csv");
      reuse = !table.rows.empty() && table.rows.front().front() == teacher_run_id(spec);
    }
    if (!reuse) return train_and_save_teacher(spec, split, dir, log);
    h.model = nets::load_checkpoint(dir / "teacher.json");
    log << "reusing teacher " << (dir / "teacher.json").string() << "\n";
  }
  if (h.model.trunk().input_dim() != split.train.dim || h.model.head_count() != 1 ||
      h.model.head(0).classes() != split.train.classes) {
    throw std::runtime_error("teacher checkpoint does not match the dataset");
  }
  h.test_accuracy = accuracy(h.model, split.test);
  return h;
}

kd::KdCriterion make_criterion(const CriterionSpec& c, kd::Variant v, std::optional<double> lambda) {
  auto crit = kd::KdCriterion::defaults(v);
  crit.lambda_f = c.lambda_f;
  crit.lambda_l = c.lambda_l;
  crit.temperature = c.temperature;
  // The feature and logit defaults follow their coefficients.
  if (v == kd::Variant::FeaturesSE || v == kd::Variant::WeightedEFeaturesSE || v == kd::Variant::WeightedHFeaturesSE) {
    crit.lambda = c.lambda_f;
  }
  if (v == kd::Variant::LogitsSE) crit.lambda = c.lambda_l;
  if (lambda && v != kd::Variant::None) crit.lambda = *lambda;
  return crit;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::nan(""), std::nan("")};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - m) * (x - m);
  return {m, std::sqrt(var / static_cast<double>(v.size()))};
}

}  // namespace

// ---------------------------------------------------------------------------
// summaries

json sweep_summary_json(const std::vector<compress::MetricRecord>& records) {
  json out;
  out["teacher_accuracy"] = nullptr;
  out["cells"] = json::array();
  out["accuracy"] = json::array();
  std::vector<double> teacher;
  for (const auto& r : records) {
    if (r.variant == "teacher" && r.split == "test" && r.metric == "accuracy") teacher.push_back(r.value);
  }
  if (teacher.empty()) return out;
  out["teacher_accuracy"] = mean_std(teacher).first;

  const auto rows = compress::rpr_rows_from_records(records);
  for (const auto& c : compress::summarize(rows)) {
    out["cells"].push_back({{"width", c.width},
                            {"variant", c.variant},
                            {"base", c.base},
                            {"rpr_mean", c.rpr_mean},
                            {"rpr_std", c.rpr_std},
                            {"acc_mean", c.acc_mean},
                            {"count", c.count}});
  }
  // Test accuracy per (width, variant), including the baselines.
  std::vector<std::pair<std::size_t, std::string>> order;
  std::map<std::pair<std::size_t, std::string>, std::vector<double>> acc;
  for (const auto& r : rows) {
    const auto key = std::make_pair(r.width, kd::to_string(r.variant));
    if (!acc.count(key)) order.push_back(key);
    acc[key].push_back(r.acc_kd);
  }
  for (const auto& key : order) {
    const auto [m, s] = mean_std(acc[key]);
    out["accuracy"].push_back(
        {{"width", key.first}, {"variant", key.second}, {"mean", m}, {"std", s}, {"count", acc[key].size()}});
  }
  return out;
}

void write_sweep_summaries(const fs::path& dir, const std::vector<compress::MetricRecord>& records) {
  std::vector<compress::SweepCell> cells;
  bool has_teacher = std::any_of(records.begin(), records.end(), [](const auto& r) { return r.variant == "teacher"; });
  if (has_teacher) cells = compress::summarize(compress::rpr_rows_from_records(records));
  write_csv(dir / "plot.csv", compress::plot_table(cells));
  write_json(dir / "summary.json", sweep_summary_json(records));
}

io::CsvTable incremental_table(const std::string& id, const il::IlResult& result) {
  io::CsvTable t{kIncrementalHeader, {}};
  for (const auto& e : result.accuracy) {
    t.rows.push_back({id, il::to_string(result.method), std::to_string(e.task_seen + 1), std::to_string(e.task_eval + 1),
                      std::to_string(result.seed), io::format_double(e.accuracy)});
  }
  return t;
}

json incremental_summary_json(const std::vector<io::CsvTable>& tables) {
  struct Run {
    std::string method;
    std::uint64_t seed = 0;
    std::map<std::pair<std::size_t, std::size_t>, double> acc;
  };
  std::vector<std::string> run_order;
  std::map<std::string, Run> runs;
  std::vector<std::string> method_order;
  for (const auto& t : tables) {
    if (t.header != kIncrementalHeader) throw std::runtime_error("incremental csv: unexpected header");
    for (const auto& row : t.rows) {
      auto [it, fresh] = runs.try_emplace(row[0]);
      if (fresh) {
        run_order.push_back(row[0]);
        it->second.method = row[1];
        it->second.seed = std::stoull(row[4]);
        if (std::find(method_order.begin(), method_order.end(), row[1]) == method_order.end()) {
          method_order.push_back(row[1]);
        }
      }
      it->second.acc[{std::stoull(row[2]), std::stoull(row[3])}] = std::stod(row[5]);
    }
  }
  json out;
  out["methods"] = json::array();
  for (const auto& m : method_order) {
    std::vector<double> finals, forgetting;
    json per_seed = json::array();
    for (const auto& id : run_order) {
      const auto& run = runs[id];
      if (run.method != m) continue;
      std::size_t last = 0;
      for (const auto& [key, v] : run.acc) last = std::max(last, key.first);
      std::vector<double> row;
      for (const auto& [key, v] : run.acc) {
        if (key.first == last) row.push_back(v);
      }
      const double avg = mean_std(row).first;
      finals.push_back(avg);
      json entry = {{"run_id", id}, {"seed", run.seed}, {"final_average", avg}};
      if (auto first = run.acc.find({1, 1}); first != run.acc.end() && last > 1) {
        const double f = first->second - run.acc.at({last, 1});
        forgetting.push_back(f);
        entry["forgetting_first_task"] = f;
      }
      per_seed.push_back(entry);
    }
    const auto [fm, fs_] = mean_std(finals);
    json method = {{"method", m},
                   {"runs", finals.size()},
                   {"final_average", {{"mean", fm}, {"std", fs_}}},
                   {"per_run", per_seed}};
    if (!forgetting.empty()) {
      const auto [gm, gs] = mean_std(forgetting);
      method["forgetting_first_task"] = {{"mean", gm}, {"std", gs}};
    } else {
      method["forgetting_first_task"] = nullptr;
    }
    out["methods"].push_back(method);
  }
  return out;
}

namespace {

std::vector<fs::path> incremental_csvs(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && name.rfind("incremental_", 0) == 0 && e.path().extension() == ".csv") {
      out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

void write_incremental_summary(const fs::path& dir) {
  std::vector<io::CsvTable> tables;
  for (const auto& p : incremental_csvs(dir)) tables.push_back(io::read_csv(p));
  write_json(dir / "incremental_summary.json", incremental_summary_json(tables));
}

// ---------------------------------------------------------------------------
// commands

int cmd_verify(std::uint64_t seed, std::ostream& out) {
  const auto reports = theory::run_all(seed);
  out << theory::to_json(reports).dump(2) << "\n";
  return std::all_of(reports.begin(), reports.end(), [](const auto& r) { return r.passed; }) ? 0 : 1;
}

int cmd_train_teacher(const ExperimentSpec& spec, std::ostream& log) {
  const auto dir = output_dir(spec);
  const auto split = load_data(spec.dataset);
  train_and_save_teacher(spec, split, dir, log);
  return 0;
}

int cmd_distill(const ExperimentSpec& spec, const std::string& variant_name, std::ostream& log) {
  const auto variant = kd::parse_variant(variant_name);
  const auto dir = output_dir(spec);
  const auto split = load_data(spec.dataset);
  std::optional<TeacherHandle> teacher;
  if (variant != kd::Variant::None) teacher = obtain_teacher(spec, split, dir, log);

  compress::TrainConfig base;
  base.schedule = spec.schedule;
  base.criterion = make_criterion(spec.criterion, variant, spec.criterion.lambda);
  base.hidden = spec.student.hidden;
  base.feature_dim = spec.student.feature_dim;
  const auto name = kd::to_string(variant);

  std::vector<compress::RunResult> results(spec.seeds.size());
  parallel_for(spec.seeds.size(), workers_from_env(), [&](std::size_t i) {
    auto cfg = base;
    cfg.seed = spec.seeds[i];
    results[i] = compress::train(cfg, split, teacher ? &teacher->model : nullptr).result;
  });

  std::vector<compress::MetricRecord> records;
  io::CsvTable epochs{{"run_id", "seed", "epoch", "lr", "train_loss", "train_divergence", "train_accuracy",
                       "test_accuracy"},
                      {}};
  std::vector<double> acc;
  json per_seed = json::array();
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto seed = spec.seeds[i];
    const auto id = run_id(spec, seed, "distill:" + name);
    auto recs = compress::run_records(id, name, base.feature_dim, seed, results[i]);
    records.insert(records.end(), recs.begin(), recs.end());
    for (const auto& e : results[i].epochs) {
      epochs.rows.push_back({id, std::to_string(seed), std::to_string(e.epoch + 1), io::format_double(e.lr),
                             io::format_double(e.train_loss), io::format_double(e.train_divergence),
                             io::format_double(e.train_accuracy), io::format_double(e.test_accuracy)});
    }
    acc.push_back(results[i].final_test_accuracy);
    per_seed.push_back({{"seed", seed}, {"run_id", id}, {"test_accuracy", results[i].final_test_accuracy},
                        {"all_losses_finite", results[i].all_losses_finite}});
    log << name << " seed " << seed << ": test accuracy " << io::format_double(results[i].final_test_accuracy) << "\n";
  }
  write_csv(dir / ("distill_" + name + ".csv"), compress::records_table(records));
  write_csv(dir / ("distill_" + name + "_epochs.csv"), epochs);
  const auto [m, s] = mean_std(acc);
  json summary = {{"variant", name},
                  {"lambda", base.criterion.lambda},
                  {"width", base.feature_dim},
                  {"test_accuracy", {{"mean", m}, {"std", s}}},
                  {"runs", per_seed}};
  if (teacher) summary["teacher_accuracy"] = teacher->test_accuracy;
  write_json(dir / ("distill_" + name + ".json"), summary);
  return 0;
}

int cmd_sweep_width(const ExperimentSpec& spec, std::ostream& log) {
  const auto dir = output_dir(spec);
  const auto split = load_data(spec.dataset);
  const auto teacher = obtain_teacher(spec, split, dir, log);

  compress::SweepConfig sc;
  sc.widths = spec.sweep.widths;
  sc.variants.clear();
  for (const auto& v : spec.sweep.variants) sc.variants.push_back(kd::parse_variant(v));
  sc.seeds = spec.seeds;
  sc.base.schedule = spec.schedule;
  sc.base.hidden = spec.student.hidden;
  sc.base.criterion.lambda_f = spec.criterion.lambda_f;
  sc.base.criterion.lambda_l = spec.criterion.lambda_l;
  sc.base.criterion.temperature = spec.criterion.temperature;
  sc.workers = workers_from_env();
  sc.run_id = [&spec](kd::Variant v, std::size_t width, std::uint64_t seed) {
    return run_id(spec, seed, "sweep:" + kd::to_string(v) + ":" + std::to_string(width));
  };

  std::vector<kd::Variant> all = {kd::Variant::HintonKD};
  for (auto v : sc.variants) {
    if (std::find(all.begin(), all.end(), v) == all.end()) all.push_back(v);
  }
  for (auto v : all) sc.lambdas[v] = make_criterion(spec.criterion, v, std::nullopt).lambda;
  if (!spec.sweep.lambda_grid.empty()) {
    // Tune on one pair: a 3:1 fit/validation split of the training data at the tuning width.
    const auto [fit, val] = data::stratified_indices(split.train, 0.75, derive_seed(spec.dataset.seed, 5));
    const data::Split tuning{split.train.subset(fit), split.train.subset(val)};
    const compress::TuningPair pair{"width=" + std::to_string(spec.sweep.tuning_width), true};
    auto chosen = compress::hyperparam_protocol(
        {pair}, sc.variants, spec.sweep.lambda_grid, [&](const compress::TuningPair&, kd::Variant v, double lambda) {
          auto cfg = sc.base;
          cfg.seed = spec.seeds.front();
          cfg.feature_dim = spec.sweep.tuning_width;
          cfg.criterion = make_criterion(spec.criterion, v, lambda);
          return compress::train(cfg, tuning, &teacher.model).result.final_test_accuracy;
        });
    for (const auto& [v, lambda] : chosen) sc.lambdas[v] = lambda;
  }
  for (const auto& [name, lambda] : spec.sweep.lambdas) sc.lambdas[kd::parse_variant(name)] = lambda;
  json lambdas = json::object();
  for (const auto& [v, lambda] : sc.lambdas) lambdas[kd::to_string(v)] = lambda;
  write_json(dir / "sweep_lambdas.json", lambdas);

  const auto result = compress::width_sweep(sc, split, teacher.model, teacher.test_accuracy);
  write_csv(dir / "runs.csv", compress::records_table(result.records));
  write_sweep_summaries(dir, result.records);
  log << "sweep: " << result.records.size() << " records, teacher accuracy "
      << io::format_double(teacher.test_accuracy) << "\n";
  return 0;
}

int cmd_incremental(const ExperimentSpec& spec, const std::string& method, std::ostream& log) {
  const auto dir = output_dir(spec);
  const auto split = load_data(spec.dataset);
  const auto curriculum = il::split_tasks(split, spec.incremental.tasks, spec.incremental.class_shuffle_seed);

  il::IlConfig base;
  base.schedule = spec.incremental.schedule.value_or(spec.schedule);
  base.hidden = spec.student.hidden;
  base.feature_dim = spec.student.feature_dim;
  base.si_xi = spec.incremental.si_xi;
  base.seed = spec.seeds.front();

  std::vector<std::string> names = method.empty() ? spec.incremental.methods : std::vector<std::string>{method};
  json lambdas = json::object();
  if (fs::exists(dir / "incremental_lambdas.json")) lambdas = json::parse(io::read_file(dir / "incremental_lambdas.json"));
  for (const auto& name : names) {
    const auto m = il::parse_method(name);
    double lambda = default_il_lambda(m);
    if (auto it = spec.incremental.lambdas.find(name); it != spec.incremental.lambdas.end()) lambda = it->second;
    if (auto it = spec.incremental.lambda_grids.find(name); it != spec.incremental.lambda_grids.end()) {
      lambda = il::grid_search_lambda(curriculum, m, it->second, base, spec.incremental.data_fraction).lambda;
    }
    lambdas[il::to_string(m)] = lambda;

    std::vector<il::IlResult> results(spec.seeds.size());
    parallel_for(spec.seeds.size(), workers_from_env(), [&](std::size_t i) {
      auto cfg = base;
      cfg.seed = spec.seeds[i];
      results[i] = il::il_train(curriculum, m, lambda, cfg);
    });
    io::CsvTable table{kIncrementalHeader, {}};
    for (const auto& r : results) {
      const auto id = run_id(spec, r.seed, "incremental:" + il::to_string(m) + ":" + io::format_double(lambda));
      const auto t = incremental_table(id, r);
      table.rows.insert(table.rows.end(), t.rows.begin(), t.rows.end());
      log << il::to_string(m) << " seed " << r.seed << ": final average accuracy "
          << io::format_double(r.final_average()) << "\n";
    }
    write_csv(dir / ("incremental_" + il::to_string(m) + ".csv"), table);
  }
  write_json(dir / "incremental_lambdas.json", lambdas);
  write_incremental_summary(dir);
  return 0;
}

int cmd_report(const fs::path& dir, std::ostream& log) {
  bool found = false;
  if (fs::exists(dir / "runs.csv")) {
    write_sweep_summaries(dir, compress::records_from_table(io::read_csv(dir / "runs.csv")));
    log << "wrote " << (dir / "plot.csv").string() << " and " << (dir / "summary.json").string() << "\n";
    found = true;
  }
  if (!incremental_csvs(dir).empty()) {
    write_incremental_summary(dir);
    log << "wrote " << (dir / "incremental_summary.json").string() << "\n";
    found = true;
  }
  if (!found) throw std::runtime_error("report: no runs.csv or incremental_*.csv in " + dir.string());
  return 0;
}

}  // namespace kdlab::exp
