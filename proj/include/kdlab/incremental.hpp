#pragma once

// Task-incremental learning: tasks over disjoint class sets arrive in order,
// each gets its own head, and the task identity routes every test item to its
// head. Forgetting is countered either in output space (distilling the
// previous model's heads or features) or in parameter space (EWC, SI, MAS, L2).

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kdlab/autodiff.hpp"
#include "kdlab/datasets.hpp"
#include "kdlab/nets.hpp"
#include "kdlab/training.hpp"

namespace kdlab::il {

struct Task {
  std::vector<int> classes;  // global class ids; local label i means classes[i]
  data::Dataset train;       // labels are local
  data::Dataset test;
};

struct TaskCurriculum {
  std::vector<Task> tasks;
  std::size_t dim = 0;

  std::size_t size() const { return tasks.size(); }
};

// Partitions the classes into n_tasks equal groups. Without a seed the class
// order is the identity ({0,1},{2,3},... for 10 classes and 5 tasks).
TaskCurriculum split_tasks(const data::Split& split, std::size_t n_tasks,
                           std::optional<std::uint64_t> class_shuffle_seed = std::nullopt);

enum class Method {
  Vanilla,
  LogitsSE,
  WeightedHFeaturesSE,
  FeaturesSE,
  EWC,
  SI,
  MAS,
  L2,
  OfflineJoint,
};

std::string to_string(Method m);
Method parse_method(std::string_view name);
std::vector<Method> all_methods();
bool is_output_space(Method m);
bool is_parameter_space(Method m);

// current_task is 1-based; heads 0 .. current_task-2 are the previous ones.
// Sum over previous heads of the batch-mean squared logit distance.
ad::Tensor d_g_il_logits(const nets::MultiHeadNet& student, const nets::MultiHeadNet& snapshot,
                         const ad::Tensor& x, std::size_t current_task);
// Sum over previous heads of the feature distance weighted by the squared
// gradient of that head's mean-squared logits (identity weights when
// `identity_weights`).
ad::Tensor d_g_il_features(const nets::MultiHeadNet& student, const nets::MultiHeadNet& snapshot,
                           const ad::Tensor& x, std::size_t current_task, bool identity_weights = false);

// Forms taking precomputed student features and detached snapshot features.
ad::Tensor d_g_il_logits(const nets::MultiHeadNet& student, const ad::Tensor& z_s,
                         const nets::MultiHeadNet& snapshot, const ad::Tensor& z_t, std::size_t previous_heads);
ad::Tensor d_g_il_features(const ad::Tensor& z_s, const nets::MultiHeadNet& snapshot, const ad::Tensor& z_t,
                           std::size_t previous_heads, bool identity_weights);

// [b x dim] sum over the given snapshot heads of (grad_z (1/k) sum_y l_y^2)^2, per row.
ad::Tensor il_feature_weights(const nets::MultiHeadNet& snapshot, const ad::Tensor& z_t, std::size_t previous_heads);

struct ImportanceState {
  Method method = Method::L2;
  double xi = 0.1;                 // SI damping
  std::vector<double> anchor;      // parameters at the last consolidation
  std::vector<double> omega;       // importance, same length as anchor, >= 0
  std::vector<double> si_path;     // SI path integral over the current task
  std::vector<double> si_start;    // parameters at the start of the current task

  bool active() const { return !anchor.empty(); }
  // SI bookkeeping at the start of a task (after the task's head is added).
  void begin_task(std::span<const double> params);
  // si_path += -grad * delta for one optimizer step.
  void accumulate_step(std::span<const double> grad, std::span<const double> delta);
  // (1/2) sum omega (theta - anchor)^2 over the anchored prefix of params.
  double penalty(std::span<const double> params) const;
  // grad += lambda * omega * (theta - anchor) over the anchored prefix.
  void add_penalty_grad(std::span<const double> params, double lambda, std::span<double> grad) const;
};

// max(0, path / (delta^2 + xi)) elementwise: one task's SI importance.
std::vector<double> si_importance(std::span<const double> path, std::span<const double> delta, double xi);

// Refreshes the anchor to the model's parameters and adds this task's
// importance to `previous.omega` (new parameters start at zero importance).
// EWC needs labels; MAS and L2 do not. SI uses the path integral collected
// through accumulate_step.
ImportanceState consolidate(const nets::MultiHeadNet& model, const data::Dataset& task_data, std::size_t head,
                            Method method, ImportanceState previous);

struct IlConfig {
  Schedule schedule;  // applied to every task
  std::uint64_t seed = 0;
  std::vector<std::size_t> hidden = {64};
  std::size_t feature_dim = 64;
  double si_xi = 0.1;

  void validate() const;
};

struct AccuracyEntry {
  std::size_t task_seen = 0;  // 0-based; the number of tasks trained so far minus one
  std::size_t task_eval = 0;
  double accuracy = 0.0;
};

struct IlResult {
  Method method = Method::Vanilla;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  std::size_t tasks = 0;
  std::vector<AccuracyEntry> accuracy;  // ordered by (task_seen, task_eval)
  bool all_losses_finite = true;

  double at(std::size_t task_seen, std::size_t task_eval) const;
  // Mean accuracy over all tasks after the last one has been trained.
  double final_average() const;
  // Accuracy on `task` right after training it minus its final accuracy.
  double forgetting(std::size_t task) const;
};

// Sequential training over the curriculum. OfflineJoint trains on every task
// at once and reports only the final row.
IlResult il_train(const TaskCurriculum& curriculum, Method method, double lambda, const IlConfig& config);

// Per task, a stratified `fraction` of the training data split 3:1 into fit
// and validation parts; the validation part stands in as the test split.
TaskCurriculum tuning_curriculum(const TaskCurriculum& curriculum, double fraction, std::uint64_t seed);
// `config` with epochs scaled so a tuning run takes as many optimizer steps
// as a run on the full curriculum.
IlConfig tuning_config(const TaskCurriculum& full, const TaskCurriculum& tuning, const IlConfig& config);

struct GridSearchResult {
  double lambda = 0.0;
  std::vector<std::pair<double, double>> scores;  // (lambda, final average accuracy)
};

// Argmax of the final average accuracy on the tuning curriculum, trained with
// tuning_config; ties go to the smallest lambda and runs with a non-finite
// loss are never chosen.
GridSearchResult grid_search_lambda(const TaskCurriculum& curriculum, Method method, const std::vector<double>& grid,
                                    const IlConfig& config, double data_fraction = 0.2);

}  // namespace kdlab::il
