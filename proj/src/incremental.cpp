#include "kdlab/incremental.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "kdlab/kd_criteria.hpp"
#include "kdlab/rng.hpp"

namespace kdlab::il {

using ad::Tensor;
using nets::MultiHeadNet;

// ---------------------------------------------------------------------------
// curriculum

namespace {

data::Dataset filter_classes(const data::Dataset& ds, const std::vector<int>& classes) {
  std::vector<int> local(ds.classes, -1);
  for (std::size_t i = 0; i < classes.size(); ++i) local[static_cast<std::size_t>(classes[i])] = static_cast<int>(i);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (local[static_cast<std::size_t>(ds.labels[i])] >= 0) keep.push_back(i);
  }
  data::Dataset out = ds.subset(keep);
  out.classes = classes.size();
  for (auto& y : out.labels) y = local[static_cast<std::size_t>(y)];
  return out;
}

}  // namespace

TaskCurriculum split_tasks(const data::Split& split, std::size_t n_tasks,
                           std::optional<std::uint64_t> class_shuffle_seed) {
  const std::size_t k = split.train.classes;
  if (n_tasks == 0 || k % n_tasks != 0) {
    throw std::invalid_argument("split_tasks: " + std::to_string(n_tasks) + " tasks do not divide " +
                                std::to_string(k) + " classes");
  }
  if (split.test.classes != k || split.test.dim != split.train.dim) {
    throw std::invalid_argument("split_tasks: train and test splits disagree");
  }
  const std::size_t per_task = k / n_tasks;
  if (per_task < 2) throw std::invalid_argument("split_tasks: every task needs at least 2 classes");

  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  if (class_shuffle_seed) order = data::shuffled_indices(k, *class_shuffle_seed);

  TaskCurriculum out;
  out.dim = split.train.dim;
  for (std::size_t t = 0; t < n_tasks; ++t) {
    Task task;
    for (std::size_t c = 0; c < per_task; ++c) task.classes.push_back(static_cast<int>(order[t * per_task + c]));
    task.train = filter_classes(split.train, task.classes);
    task.test = filter_classes(split.test, task.classes);
    out.tasks.push_back(std::move(task));
  }
  return out;
}

// ---------------------------------------------------------------------------
// methods

namespace {
constexpr std::pair<Method, const char*> kMethodNames[] = {
    {Method::Vanilla, "vanilla"},       {Method::LogitsSE, "LogitsSE"},
    {Method::WeightedHFeaturesSE, "WeightedHFeaturesSE"}, {Method::FeaturesSE, "FeaturesSE"},
    {Method::EWC, "EWC"},               {Method::SI, "SI"},
    {Method::MAS, "MAS"},               {Method::L2, "L2"},
    {Method::OfflineJoint, "offline"},
};
}  // namespace

std::string to_string(Method m) {
  for (const auto& [method, name] : kMethodNames) {
    if (method == m) return name;
  }
  throw std::invalid_argument("unknown method");
}

Method parse_method(std::string_view name) {
  for (const auto& [method, n] : kMethodNames) {
    if (name == n) return method;
  }
  std::string known;
  for (const auto& [method, n] : kMethodNames) known += std::string(known.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown method '" + std::string(name) + "' (known: " + known + ")");
}

std::vector<Method> all_methods() {
  std::vector<Method> out;
  for (const auto& [method, name] : kMethodNames) out.push_back(method);
  return out;
}

bool is_output_space(Method m) {
  return m == Method::LogitsSE || m == Method::WeightedHFeaturesSE || m == Method::FeaturesSE;
}

bool is_parameter_space(Method m) {
  return m == Method::EWC || m == Method::SI || m == Method::MAS || m == Method::L2;
}

// ---------------------------------------------------------------------------
// output-space regularizers

Tensor d_g_il_logits(const MultiHeadNet& student, const Tensor& z_s, const MultiHeadNet& snapshot, const Tensor& z_t,
                     std::size_t previous_heads) {
  if (previous_heads == 0) throw std::invalid_argument("d_g_il_logits: no previous heads");
  Tensor total;
  for (std::size_t j = 0; j < previous_heads; ++j) {
    const Tensor l_s = student.head_logits(z_s, j);
    const Tensor l_t = ad::detach(snapshot.head_logits(z_t, j));
    const Tensor term = kd::d_g(l_s, l_t, kd::WeightDiag::identity(l_s.cols()));
    total = total.defined() ? ad::add(total, term) : term;
  }
  return total;
}

Tensor il_feature_weights(const MultiHeadNet& snapshot, const Tensor& z_t, std::size_t previous_heads) {
  const std::size_t b = z_t.rows();
  const std::size_t n = z_t.cols();
  std::vector<double> w(b * n, 0.0);
  for (std::size_t j = 0; j < previous_heads; ++j) {
    const auto head = kd::HeadParams::from(snapshot.head(j));
    for (std::size_t r = 0; r < b; ++r) {
      const auto g = kd::grad_lh(z_t.values().subspan(r * n, n), head);
      const auto wd = kd::weight_diag(g, kd::WeightSource::LogitMagnitude);
      for (std::size_t i = 0; i < n; ++i) w[r * n + i] += wd.w[i];
    }
  }
  return Tensor::constant({b, n}, std::move(w));
}

Tensor d_g_il_features(const Tensor& z_s, const MultiHeadNet& snapshot, const Tensor& z_t, std::size_t previous_heads,
                       bool identity_weights) {
  if (previous_heads == 0) throw std::invalid_argument("d_g_il_features: no previous heads");
  const Tensor zt = ad::detach(z_t);
  if (identity_weights) {
    // Summing identity weights over the previous heads multiplies the SE.
    std::vector<double> w(zt.size(), static_cast<double>(previous_heads));
    return kd::d_g(z_s, zt, Tensor::constant(zt.shape(), std::move(w)));
  }
  return kd::d_g(z_s, zt, il_feature_weights(snapshot, zt, previous_heads));
}

Tensor d_g_il_logits(const MultiHeadNet& student, const MultiHeadNet& snapshot, const Tensor& x,
                     std::size_t current_task) {
  if (current_task < 2) throw std::invalid_argument("d_g_il_logits: current_task must be >= 2");
  if (snapshot.head_count() < current_task - 1) throw std::invalid_argument("d_g_il_logits: snapshot lacks heads");
  return d_g_il_logits(student, student.features(x), snapshot, ad::detach(snapshot.features(x)), current_task - 1);
}

Tensor d_g_il_features(const MultiHeadNet& student, const MultiHeadNet& snapshot, const Tensor& x,
                       std::size_t current_task, bool identity_weights) {
  if (current_task < 2) throw std::invalid_argument("d_g_il_features: current_task must be >= 2");
  if (snapshot.head_count() < current_task - 1) throw std::invalid_argument("d_g_il_features: snapshot lacks heads");
  return d_g_il_features(student.features(x), snapshot, snapshot.features(x), current_task - 1, identity_weights);
}

// ---------------------------------------------------------------------------
// parameter-space regularizers

void ImportanceState::begin_task(std::span<const double> params) {
  si_start.assign(params.begin(), params.end());
  si_path.assign(params.size(), 0.0);
}

void ImportanceState::accumulate_step(std::span<const double> grad, std::span<const double> delta) {
  if (grad.size() != si_path.size() || delta.size() != si_path.size()) {
    throw std::invalid_argument("accumulate_step: length mismatch (call begin_task first)");
  }
  for (std::size_t i = 0; i < si_path.size(); ++i) si_path[i] -= grad[i] * delta[i];
}

double ImportanceState::penalty(std::span<const double> params) const {
  if (params.size() < anchor.size()) throw std::invalid_argument("penalty: fewer parameters than anchored");
  double s = 0.0;
  for (std::size_t i = 0; i < anchor.size(); ++i) {
    const double d = params[i] - anchor[i];
    s += omega[i] * d * d;
  }
  return 0.5 * s;
}

void ImportanceState::add_penalty_grad(std::span<const double> params, double lambda, std::span<double> grad) const {
  if (params.size() < anchor.size() || grad.size() != params.size()) {
    throw std::invalid_argument("add_penalty_grad: length mismatch");
  }
  for (std::size_t i = 0; i < anchor.size(); ++i) grad[i] += lambda * omega[i] * (params[i] - anchor[i]);
}

std::vector<double> si_importance(std::span<const double> path, std::span<const double> delta, double xi) {
  if (path.size() != delta.size()) throw std::invalid_argument("si_importance: length mismatch");
  if (!(xi > 0.0)) throw std::invalid_argument("si_importance: xi must be positive");
  std::vector<double> out(path.size());
  for (std::size_t i = 0; i < path.size(); ++i) out[i] = std::max(0.0, path[i] / (delta[i] * delta[i] + xi));
  return out;
}

namespace {

std::vector<double> flat_grad(const std::vector<Tensor>& params) {
  std::vector<double> out;
  for (const auto& p : params) {
    const auto g = p.grad();
    if (g.empty()) {
      out.insert(out.end(), p.size(), 0.0);
    } else {
      out.insert(out.end(), g.begin(), g.end());
    }
  }
  return out;
}

std::vector<double> flat_values(const std::vector<Tensor>& params) {
  std::vector<double> out;
  for (const auto& p : params) out.insert(out.end(), p.values().begin(), p.values().end());
  return out;
}

void scatter_grad(std::vector<Tensor>& params, std::span<const double> flat) {
  std::size_t off = 0;
  for (auto& p : params) {
    auto g = p.mutable_grad();
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
              flat.begin() + static_cast<std::ptrdiff_t>(off + g.size()), g.begin());
    off += g.size();
  }
}

std::size_t data_rows(const data::Dataset& ds) { return ds.dim == 0 ? 0 : ds.features.size() / ds.dim; }

// Mean over samples of f(per-sample gradient), one backward per sample.
template <class LossFn, class Accumulate>
std::vector<double> per_sample_mean(const MultiHeadNet& model, const data::Dataset& ds, LossFn loss_fn,
                                    Accumulate accumulate) {
  auto params = model.parameters();
  std::vector<double> acc(model.parameter_count(), 0.0);
  const std::size_t n = data_rows(ds);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t idx[] = {i};
    for (auto& p : params) p.zero_grad();
    ad::backward(loss_fn(ds.batch(idx), i));
    const auto g = flat_grad(params);
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += accumulate(g[j]);
  }
  for (auto& p : params) p.zero_grad();
  if (n > 0) {
    for (auto& v : acc) v /= static_cast<double>(n);
  }
  return acc;
}

}  // namespace

ImportanceState consolidate(const MultiHeadNet& model, const data::Dataset& task_data, std::size_t head,
                            Method method, ImportanceState previous) {
  if (!is_parameter_space(method)) {
    throw std::invalid_argument("consolidate: " + to_string(method) + " is not a parameter-space method");
  }
  model.head(head);
  ImportanceState state = std::move(previous);
  state.method = method;
  const auto params = model.parameters();
  const auto theta = flat_values(params);
  const std::size_t n = theta.size();
  state.omega.resize(n, 0.0);

  std::vector<double> contribution;
  switch (method) {
    case Method::EWC: {
      if (task_data.labels.size() != data_rows(task_data) || task_data.labels.empty()) {
        throw std::invalid_argument("consolidate: EWC needs labelled task data");
      }
      contribution = per_sample_mean(
          model, task_data,
          [&](const Tensor& x, std::size_t i) {
            const int y[] = {task_data.labels[i]};
            return ad::softmax_cross_entropy(model.forward(x, head).logits, y);
          },
          [](double g) { return g * g; });
      break;
    }
    case Method::MAS: {
      contribution = per_sample_mean(
          model, task_data,
          [&](const Tensor& x, std::size_t) {
            return ad::mean(ad::square(model.forward(x, head).logits));
          },
          [](double g) { return std::abs(g); });
      break;
    }
    case Method::L2:
      state.omega.assign(n, 1.0);
      break;
    case Method::SI: {
      if (state.si_start.size() != n || state.si_path.size() != n) {
        throw std::logic_error("consolidate: SI state was not started for the current parameters");
      }
      std::vector<double> delta(n);
      for (std::size_t i = 0; i < n; ++i) delta[i] = theta[i] - state.si_start[i];
      contribution = si_importance(state.si_path, delta, state.xi);
      std::fill(state.si_path.begin(), state.si_path.end(), 0.0);
      break;
    }
    default:
      break;
  }
  for (std::size_t i = 0; i < contribution.size(); ++i) state.omega[i] += contribution[i];
  state.anchor = theta;
  return state;
}

// ---------------------------------------------------------------------------
// training

void IlConfig::validate() const {
  schedule.validate();
  if (feature_dim == 0) throw std::invalid_argument("incremental config: feature_dim must be positive");
  for (auto h : hidden) {
    if (h == 0) throw std::invalid_argument("incremental config: hidden widths must be positive");
  }
  if (!(si_xi > 0.0)) throw std::invalid_argument("incremental config: si_xi must be positive");
}

double IlResult::at(std::size_t task_seen, std::size_t task_eval) const {
  for (const auto& e : accuracy) {
    if (e.task_seen == task_seen && e.task_eval == task_eval) return e.accuracy;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

double IlResult::final_average() const {
  if (tasks == 0) return 0.0;
  double s = 0.0;
  for (std::size_t t = 0; t < tasks; ++t) s += at(tasks - 1, t);
  return s / static_cast<double>(tasks);
}

double IlResult::forgetting(std::size_t task) const { return at(task, task) - at(tasks - 1, task); }

namespace {

constexpr std::uint64_t kHeadStream = 1000;

std::uint64_t batch_seed(std::uint64_t seed, std::size_t task, std::size_t epoch) {
  return derive_seed(derive_seed(seed, 10000 + task), epoch);
}

MultiHeadNet initial_net(const TaskCurriculum& c, const IlConfig& config) {
  std::vector<std::size_t> widths{c.dim};
  widths.insert(widths.end(), config.hidden.begin(), config.hidden.end());
  widths.push_back(config.feature_dim);
  return MultiHeadNet::init({widths, {c.tasks.front().train.classes}}, derive_seed(config.seed, 1));
}

void add_task_head(MultiHeadNet& net, const TaskCurriculum& c, const IlConfig& config, std::size_t t) {
  net.add_head(c.tasks[t].train.classes, derive_seed(derive_seed(config.seed, 1), kHeadStream + t));
}

void evaluate_row(const MultiHeadNet& net, const TaskCurriculum& c, std::size_t seen, IlResult& out) {
  for (std::size_t e = 0; e <= seen; ++e) out.accuracy.push_back({seen, e, accuracy(net, c.tasks[e].test, e)});
}

IlResult offline_joint(const TaskCurriculum& c, const IlConfig& config) {
  IlResult out;
  out.method = Method::OfflineJoint;
  out.seed = config.seed;
  out.tasks = c.size();
  MultiHeadNet net = initial_net(c, config);
  for (std::size_t t = 1; t < c.size(); ++t) add_task_head(net, c, config, t);
  SgdMomentum opt(net.parameters(), config.schedule.momentum, config.schedule.weight_decay);
  const double inv_tasks = 1.0 / static_cast<double>(c.size());
  for (std::size_t epoch = 0; epoch < config.schedule.epochs; ++epoch) {
    const double lr = config.schedule.lr_at(epoch);
    std::vector<std::vector<std::vector<std::size_t>>> batches;
    std::size_t steps = 0;
    for (std::size_t t = 0; t < c.size(); ++t) {
      batches.push_back(make_batches(c.tasks[t].train.size(), config.schedule.batch_size,
                                     batch_seed(config.seed, t, epoch)));
      steps = std::max(steps, batches.back().size());
    }
    for (std::size_t s = 0; s < steps; ++s) {
      Tensor total;
      for (std::size_t t = 0; t < c.size(); ++t) {
        if (batches[t].empty()) continue;
        const auto& idx = batches[t][s % batches[t].size()];
        const auto& ds = c.tasks[t].train;
        const auto y = ds.batch_labels(idx);
        const Tensor ce = ad::softmax_cross_entropy(net.forward(ds.batch(idx), t).logits, y);
        total = total.defined() ? ad::add(total, ce) : ce;
      }
      total = ad::scale(total, inv_tasks);
      if (!std::isfinite(total.item())) out.all_losses_finite = false;
      opt.zero_grad();
      ad::backward(total);
      opt.step(lr);
    }
  }
  evaluate_row(net, c, c.size() - 1, out);
  return out;
}

}  // namespace

IlResult il_train(const TaskCurriculum& curriculum, Method method, double lambda, const IlConfig& config) {
  config.validate();
  if (curriculum.tasks.empty()) throw std::invalid_argument("il_train: empty curriculum");
  if (!(lambda >= 0.0)) throw std::invalid_argument("il_train: lambda must be nonnegative");
  if (method == Method::OfflineJoint) {
    auto r = offline_joint(curriculum, config);
    r.lambda = lambda;
    return r;
  }

  IlResult out;
  out.method = method;
  out.lambda = lambda;
  out.seed = config.seed;
  out.tasks = curriculum.size();

  MultiHeadNet net = initial_net(curriculum, config);
  MultiHeadNet snapshot;
  ImportanceState state;
  state.xi = config.si_xi;
  const bool feature_method = method == Method::WeightedHFeaturesSE || method == Method::FeaturesSE;

  for (std::size_t t = 0; t < curriculum.size(); ++t) {
    const auto& task = curriculum.tasks[t];
    if (t > 0) {
      if (is_output_space(method)) snapshot = net.frozen_copy();
      add_task_head(net, curriculum, config, t);
    }
    auto params = net.parameters();
    SgdMomentum opt(params, config.schedule.momentum, config.schedule.weight_decay);
    if (method == Method::SI) state.begin_task(flat_values(params));
    const bool regularize = t > 0 && method != Method::Vanilla;

    for (std::size_t epoch = 0; epoch < config.schedule.epochs; ++epoch) {
      const double lr = config.schedule.lr_at(epoch);
      for (const auto& idx : make_batches(task.train.size(), config.schedule.batch_size,
                                          batch_seed(config.seed, t, epoch))) {
        const Tensor x = task.train.batch(idx);
        const auto y = task.train.batch_labels(idx);
        const Tensor z = net.features(x);
        Tensor total = ad::softmax_cross_entropy(net.head_logits(z, t), y);
        if (regularize && is_output_space(method)) {
          const Tensor z_t = ad::detach(snapshot.features(x));
          const Tensor d = feature_method
                               ? d_g_il_features(z, snapshot, z_t, t, method == Method::FeaturesSE)
                               : d_g_il_logits(net, z, snapshot, z_t, t);
          total = ad::add(total, ad::scale(d, lambda));
        }
        double loss = total.item();
        opt.zero_grad();
        ad::backward(total);

        if (is_parameter_space(method)) {
          const auto theta = flat_values(params);
          auto grad = flat_grad(params);
          std::vector<double> ce_grad;
          if (method == Method::SI) ce_grad = grad;
          if (state.active()) {
            loss += lambda * state.penalty(theta);
            state.add_penalty_grad(theta, lambda, grad);
            scatter_grad(params, grad);
          }
          opt.step(lr);
          if (method == Method::SI) {
            const auto after = flat_values(params);
            std::vector<double> delta(after.size());
            for (std::size_t i = 0; i < after.size(); ++i) delta[i] = after[i] - theta[i];
            state.accumulate_step(ce_grad, delta);
          }
        } else {
          opt.step(lr);
        }
        if (!std::isfinite(loss)) out.all_losses_finite = false;
      }
    }
    if (is_parameter_space(method)) state = consolidate(net, task.train, t, method, std::move(state));
    evaluate_row(net, curriculum, t, out);
  }
  return out;
}

// ---------------------------------------------------------------------------
// lambda search

TaskCurriculum tuning_curriculum(const TaskCurriculum& curriculum, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("tuning_curriculum: fraction must be in (0, 1]");
  TaskCurriculum out;
  out.dim = curriculum.dim;
  for (std::size_t t = 0; t < curriculum.size(); ++t) {
    const auto& task = curriculum.tasks[t];
    const auto [part, rest] = data::stratified_indices(task.train, fraction, derive_seed(seed, 2 * t));
    const data::Dataset sub = task.train.subset(part);
    const auto [fit, val] = data::stratified_indices(sub, 0.75, derive_seed(seed, 2 * t + 1));
    Task tuned{task.classes, sub.subset(fit), sub.subset(val)};
    if (tuned.train.size() == 0 || tuned.test.size() == 0) {
      throw std::invalid_argument("tuning_curriculum: task " + std::to_string(t) + " is too small to subsample");
    }
    out.tasks.push_back(std::move(tuned));
  }
  return out;
}

IlConfig tuning_config(const TaskCurriculum& full, const TaskCurriculum& tuning, const IlConfig& config) {
  // Same number of optimizer steps per task as the full run, so step-count
  // dependent effects (SI path sums, drift under a penalty) are tuned for.
  auto batches = [&](const TaskCurriculum& c) {
    std::size_t n = 0;
    for (const auto& t : c.tasks) n += (t.train.size() + config.schedule.batch_size - 1) / config.schedule.batch_size;
    return static_cast<double>(n);
  };
  IlConfig out = config;
  const double ratio = batches(full) / batches(tuning);
  out.schedule.epochs = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(config.schedule.epochs * ratio)));
  return out;
}

GridSearchResult grid_search_lambda(const TaskCurriculum& curriculum, Method method, const std::vector<double>& grid,
                                    const IlConfig& config, double data_fraction) {
  if (grid.empty()) throw std::invalid_argument("grid_search_lambda: empty grid");
  std::vector<double> sorted(grid);
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  const auto tuning = tuning_curriculum(curriculum, data_fraction, derive_seed(config.seed, 77));
  const auto cfg = tuning_config(curriculum, tuning, config);
  GridSearchResult out;
  out.lambda = sorted.front();
  double best = -std::numeric_limits<double>::infinity();
  for (double lambda : sorted) {
    const auto r = il_train(tuning, method, lambda, cfg);
    const double score = r.final_average();
    out.scores.emplace_back(lambda, score);
    // A run whose loss blew up is never selected.
    if (r.all_losses_finite && score > best) {
      best = score;
      out.lambda = lambda;
    }
  }
  return out;
}

}  // namespace kdlab::il
