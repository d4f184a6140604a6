#pragma once

// Config parsing and the subcommands behind the `kdlab` tool. Every command
// writes its results atomically below the config's output directory.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdlab/compression.hpp"
#include "kdlab/datasets.hpp"
#include "kdlab/incremental.hpp"
#include "kdlab/io.hpp"
#include "kdlab/training.hpp"

namespace kdlab::exp {

inline constexpr const char* kCodeVersion = "kdlab-0.1.0";

// Bad config: message starts with the key path, e.g. "dataset.dim: expected ...".
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetSpec {
  std::string kind = "blobs";  // "blobs" or "idx"
  std::size_t classes = 10;
  std::size_t clusters_per_class = 1;
  std::size_t dim = 20;
  std::size_t n_per_cluster = 100;
  double separation = 3.0;
  double sigma = 1.0;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  std::string images;         // idx only
  std::string labels;         // idx only
  std::size_t subsample = 0;  // idx only; 0 keeps every item
};

struct TeacherSpec {
  std::vector<std::size_t> hidden = {256, 256};
  std::size_t feature_dim = 128;
  std::uint64_t seed = 0;
  std::optional<Schedule> schedule;  // falls back to the top-level schedule
  std::string checkpoint;            // load instead of training when set
};

struct StudentSpec {
  std::vector<std::size_t> hidden = {64};
  std::size_t feature_dim = 64;
};

struct CriterionSpec {
  std::optional<double> lambda;  // per-variant default when absent
  double lambda_f = 3.0;
  double lambda_l = 15.0;
  double temperature = 4.0;
};

struct SweepSpec {
  std::vector<std::size_t> widths = {16, 32, 64, 128, 256, 512};
  std::vector<std::string> variants = {"FeaturesSE", "WeightedEFeaturesSE", "WeightedHFeaturesSE", "LogitsSE"};
  std::map<std::string, double> lambdas;
  std::vector<double> lambda_grid;  // empty: no search
  std::size_t tuning_width = 64;
};

struct IncrementalSpec {
  std::size_t tasks = 5;
  std::optional<std::uint64_t> class_shuffle_seed;
  std::vector<std::string> methods = {"vanilla", "LogitsSE", "WeightedHFeaturesSE", "FeaturesSE", "EWC",
                                      "SI",      "MAS",      "L2",                  "offline"};
  std::map<std::string, double> lambdas;
  std::map<std::string, std::vector<double>> lambda_grids;
  double data_fraction = 0.2;
  double si_xi = 0.1;
  std::optional<Schedule> schedule;
};

struct ExperimentSpec {
  DatasetSpec dataset;
  TeacherSpec teacher;
  StudentSpec student;
  CriterionSpec criterion;
  Schedule schedule;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::string output_dir;  // required
  SweepSpec sweep;
  IncrementalSpec incremental;

  // Fully defaulted form; its dump is the canonical text hashed into run ids.
  nlohmann::json to_json() const;
};

ExperimentSpec parse_config_text(const std::string& text);
ExperimentSpec parse_config(const std::filesystem::path& path);

// Built-in lambda per incremental method when the config gives none.
double default_il_lambda(il::Method m);

data::Split load_data(const DatasetSpec& spec);

// Short digest of (canonical config, seed, code version, tag).
std::string run_id(const ExperimentSpec& spec, std::uint64_t seed, const std::string& tag);

// Raw results -> summaries. Used both by the producing commands and `report`.
void write_sweep_summaries(const std::filesystem::path& dir, const std::vector<compress::MetricRecord>& records);
nlohmann::json sweep_summary_json(const std::vector<compress::MetricRecord>& records);

inline const io::CsvRow kIncrementalHeader = {"run_id", "method", "task_seen", "task_eval", "seed", "accuracy"};
io::CsvTable incremental_table(const std::string& run_id, const il::IlResult& result);
// Per method: final average accuracy and first-task forgetting, mean and
// population stddev over runs.
nlohmann::json incremental_summary_json(const std::vector<io::CsvTable>& tables);
void write_incremental_summary(const std::filesystem::path& dir);

int cmd_verify(std::uint64_t seed, std::ostream& out);
int cmd_train_teacher(const ExperimentSpec& spec, std::ostream& log);
int cmd_distill(const ExperimentSpec& spec, const std::string& variant, std::ostream& log);
int cmd_sweep_width(const ExperimentSpec& spec, std::ostream& log);
// Runs one method, or every configured method when `method` is empty.
int cmd_incremental(const ExperimentSpec& spec, const std::string& method, std::ostream& log);
int cmd_report(const std::filesystem::path& dir, std::ostream& log);

}  // namespace kdlab::exp
