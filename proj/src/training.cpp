#include "kdlab/training.hpp"

#include <cmath>
#include <stdexcept>

namespace kdlab {

double Schedule::lr_at(std::size_t epoch) const {
  double lr_now = lr;
  for (double frac : decay_at) {
    const auto boundary = static_cast<std::size_t>(std::llround(frac * static_cast<double>(epochs)));
    if (epoch >= boundary) lr_now *= decay_factor;
  }
  return lr_now;
}

void Schedule::validate() const {
  if (epochs < 1) throw std::invalid_argument("schedule: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("schedule: batch_size must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("schedule: lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("schedule: momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("schedule: weight_decay must be nonnegative");
  for (double f : decay_at) {
    if (!(f >= 0.0 && f <= 1.0)) throw std::invalid_argument("schedule: decay_at entries must be in [0, 1]");
  }
}

SgdMomentum::SgdMomentum(std::vector<ad::Tensor> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  for (const auto& p : params_) velocity_.emplace_back(p.size(), 0.0);
}

void SgdMomentum::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void SgdMomentum::step(double lr) {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto values = params_[k].mutable_values();
    const auto grad = params_[k].grad();
    auto& v = velocity_[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      double g = grad.empty() ? 0.0 : grad[i];
      if (weight_decay_ != 0.0) g += weight_decay_ * values[i];
      v[i] = momentum_ * v[i] + g;
      values[i] -= lr * v[i];
    }
  }
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

std::vector<int> predict(const nets::MultiHeadNet& net, const data::Dataset& ds, std::size_t head) {
  std::vector<int> out;
  out.reserve(ds.size());
  constexpr std::size_t kChunk = 512;
  for (std::size_t start = 0; start < ds.size(); start += kChunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(ds.size(), start + kChunk); ++i) idx.push_back(i);
    const auto logits = net.forward(ds.batch(idx), head).logits;
    const std::size_t k = logits.cols();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      out.push_back(static_cast<int>(argmax(logits.values().subspan(r * k, k))));
    }
  }
  return out;
}

double accuracy(const nets::MultiHeadNet& net, const data::Dataset& ds, std::size_t head) {
  if (ds.size() == 0) return 0.0;
  const auto pred = predict(net, ds, head);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ds.labels[i];
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed) {
  const auto order = data::shuffled_indices(n, seed);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  }
  return batches;
}

}  // namespace kdlab
