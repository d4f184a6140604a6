#pragma once

// Model-compression protocol: train a teacher, distill students under each
// criterion, and measure the recovered performance ratio
//
//   RPR = (acc_kd - acc_base) / (acc_teacher - acc_base)
//
// while sweeping the width of the student's penultimate layer.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kdlab/datasets.hpp"
#include "kdlab/io.hpp"
#include "kdlab/kd_criteria.hpp"
#include "kdlab/nets.hpp"
#include "kdlab/training.hpp"

namespace kdlab::compress {

struct TrainConfig {
  Schedule schedule;
  std::uint64_t seed = 0;
  kd::KdCriterion criterion;
  std::vector<std::size_t> hidden = {64};  // student hidden widths
  std::size_t feature_dim = 64;            // student penultimate width

  void validate() const;
  std::string describe() const;  // canonical text, hashed into config_hash
};

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_divergence = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

struct RunResult {
  std::vector<EpochStats> epochs;
  double final_test_accuracy = 0.0;
  double final_train_accuracy = 0.0;
  double wall_seconds = 0.0;  // informational; never written to result files
  std::uint64_t seed = 0;
  std::string config_hash;
  bool all_losses_finite = true;
  double first_step_divergence = 0.0;
  double first_step_loss = 0.0;
};

struct TrainOutcome {
  nets::MultiHeadNet model;
  std::optional<nets::LinearTransform> transform;
  RunResult result;
};

// Trains a student from scratch on CE + lambda * D. `teacher` must be given
// iff the criterion is not None; it is only ever read.
TrainOutcome train(const TrainConfig& config, const data::Split& data, const nets::MultiHeadNet* teacher);

// Teacher training is train() with criterion None and the teacher's widths.
TrainOutcome train_teacher(const Schedule& schedule, std::uint64_t seed, const std::vector<std::size_t>& hidden,
                           std::size_t feature_dim, const data::Split& data);

// nullopt when |acc_teacher - base| < 1e-9.
std::optional<double> rpr(double acc_kd, double base, double acc_teacher);

struct RprRow {
  kd::Variant variant = kd::Variant::None;
  std::size_t width = 0;
  std::uint64_t seed = 0;
  double acc_kd = 0.0;
  double acc_vanilla = 0.0;
  double acc_hkd = 0.0;
  double acc_teacher = 0.0;
  std::optional<double> rpr_vanilla;
  std::optional<double> rpr_hkd;
};

// One line of the raw results CSV: run_id,variant,width,seed,split,metric,value.
struct MetricRecord {
  std::string run_id;
  std::string variant;
  std::size_t width = 0;
  std::uint64_t seed = 0;
  std::string split;
  std::string metric;
  double value = 0.0;
};

inline const io::CsvRow kRunsHeader = {"run_id", "variant", "width", "seed", "split", "metric", "value"};
io::CsvTable records_table(const std::vector<MetricRecord>& records);
std::vector<MetricRecord> records_from_table(const io::CsvTable& table);
// Final train/test accuracy and final train loss of one run.
std::vector<MetricRecord> run_records(const std::string& run_id, const std::string& variant, std::size_t width,
                                      std::uint64_t seed, const RunResult& result);

struct SweepConfig {
  std::vector<std::size_t> widths = {16, 32, 64, 128, 256, 512};
  std::vector<kd::Variant> variants = {kd::Variant::FeaturesSE, kd::Variant::WeightedEFeaturesSE,
                                       kd::Variant::WeightedHFeaturesSE, kd::Variant::LogitsSE};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  TrainConfig base;  // criterion and feature_dim are overridden per cell
  std::map<kd::Variant, double> lambdas;  // overrides of the per-variant default lambda
  std::size_t workers = 1;
  std::function<std::string(kd::Variant, std::size_t, std::uint64_t)> run_id;  // optional
};

struct SweepResult {
  std::vector<MetricRecord> records;
  std::vector<RprRow> rows;
};

// For every (width, seed) trains a vanilla student, an HKD student and one
// student per requested variant against the fixed teacher. The teacher's own
// accuracy is passed in so every cell uses the same reference.
SweepResult width_sweep(const SweepConfig& config, const data::Split& data, const nets::MultiHeadNet& teacher,
                        double teacher_test_accuracy);

// Rebuilds RPR rows from raw records (teacher rows carry variant "teacher").
std::vector<RprRow> rpr_rows_from_records(const std::vector<MetricRecord>& records);

struct SweepCell {
  std::size_t width = 0;
  std::string variant;
  std::string base;  // "vanilla" or "hkd"
  double rpr_mean = 0.0;
  double rpr_std = 0.0;  // population stddev over seeds
  double acc_mean = 0.0;
  std::size_t count = 0;
};

// Seed-averaged cells ordered by (width, variant order of appearance, base).
std::vector<SweepCell> summarize(const std::vector<RprRow>& rows);
// Long-form plot table: width,variant,rpr_mean,rpr_std,base.
io::CsvTable plot_table(const std::vector<SweepCell>& cells);

struct TuningPair {
  std::string name;
  bool tuning = false;
};

// Validation accuracy of `variant` with coefficient lambda on a pair.
using PairEvaluator = std::function<double(const TuningPair&, kd::Variant, double lambda)>;

// Grid search on the single pair flagged `tuning`; the winners apply to every
// pair. An empty grid skips the search and returns the per-variant defaults.
// Ties go to the smallest lambda.
std::map<kd::Variant, double> hyperparam_protocol(const std::vector<TuningPair>& pairs,
                                                  const std::vector<kd::Variant>& variants,
                                                  const std::vector<double>& grid, const PairEvaluator& evaluate);

}  // namespace kdlab::compress
