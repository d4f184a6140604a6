#pragma once

// Pieces shared by the compression and incremental harnesses: the SGD
// optimizer, the step learning-rate schedule, seed derivation and accuracy.

#include <cstdint>
#include <span>
#include <vector>

#include "kdlab/autodiff.hpp"
#include "kdlab/datasets.hpp"
#include "kdlab/nets.hpp"
#include "kdlab/rng.hpp"

namespace kdlab {

struct Schedule {
  std::size_t epochs = 40;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double decay_factor = 0.1;
  std::vector<double> decay_at = {0.6, 0.8};  // fractions of total epochs

  double lr_at(std::size_t epoch) const;
  void validate() const;
};

// v = momentum * v + g + wd * theta; theta -= lr * v. Tensors without a
// gradient are treated as having a zero gradient.
class SgdMomentum {
 public:
  SgdMomentum(std::vector<ad::Tensor> params, double momentum, double weight_decay = 0.0);

  void zero_grad();
  void step(double lr);
  const std::vector<ad::Tensor>& params() const { return params_; }

 private:
  std::vector<ad::Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
  double weight_decay_;
};

// Argmax with ties broken by the lowest class index.
std::vector<int> predict(const nets::MultiHeadNet& net, const data::Dataset& ds, std::size_t head = 0);
double accuracy(const nets::MultiHeadNet& net, const data::Dataset& ds, std::size_t head = 0);
std::size_t argmax(std::span<const double> row);

// Batches of a seed-shuffled permutation of [0, n); the last batch may be short.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed);

}  // namespace kdlab
