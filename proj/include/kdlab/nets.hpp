#pragma once

// Small MLP classifiers: a shared trunk emitting penultimate features and one
// linear head per task, plus the train-only linear transform that maps student
// features into the teacher's feature space.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kdlab/autodiff.hpp"

namespace kdlab::nets {

// Affine layer: y = x . weight^T + bias, weight is [out x in].
struct Dense {
  ad::Tensor weight;
  ad::Tensor bias;

  std::size_t in_dim() const { return weight.shape()[1]; }
  std::size_t out_dim() const { return weight.shape()[0]; }
  ad::Tensor operator()(const ad::Tensor& x) const { return ad::linear(x, weight, bias); }
};

enum class InitScheme {
  He,     // N(0, 2/fan_in), for layers followed by relu
  LeCun,  // N(0, 1/fan_in), for linear outputs
};

Dense make_dense(std::size_t in, std::size_t out, InitScheme scheme, std::uint64_t seed,
                 bool trainable = true);

// widths = {input, hidden..., penultimate}. relu after every layer but the last.
class MlpTrunk {
 public:
  MlpTrunk() = default;
  MlpTrunk(std::vector<std::size_t> widths, std::uint64_t seed);

  ad::Tensor operator()(const ad::Tensor& x) const;

  const std::vector<std::size_t>& widths() const { return widths_; }
  std::size_t input_dim() const { return widths_.front(); }
  std::size_t feature_dim() const { return widths_.back(); }
  const std::vector<Dense>& layers() const { return layers_; }
  std::vector<Dense>& layers() { return layers_; }
  std::size_t parameter_count() const;

 private:
  std::vector<std::size_t> widths_;
  std::vector<Dense> layers_;
};

struct LinearHead {
  Dense layer;
  std::size_t classes() const { return layer.out_dim(); }
};

// The transform r. Only ever applied on the training path of feature losses.
struct LinearTransform {
  Dense layer;
  static LinearTransform create(std::size_t student_dim, std::size_t teacher_dim,
                                std::uint64_t seed);
  ad::Tensor operator()(const ad::Tensor& z) const { return layer(z); }
  std::vector<ad::Tensor> parameters() const { return {layer.weight, layer.bias}; }
};

struct NetSpec {
  std::vector<std::size_t> widths;       // trunk widths including input and feature dim
  std::vector<std::size_t> head_classes;  // one entry per initial head
};

struct ForwardResult {
  ad::Tensor features;
  ad::Tensor logits;
};

class MultiHeadNet {
 public:
  MultiHeadNet() = default;
  static MultiHeadNet init(const NetSpec& spec, std::uint64_t seed);

  ForwardResult forward(const ad::Tensor& x, std::size_t head_index) const;
  ad::Tensor features(const ad::Tensor& x) const;
  ad::Tensor head_logits(const ad::Tensor& features, std::size_t head_index) const;

  // Appends a freshly initialized head for k classes; returns its index.
  std::size_t add_head(std::size_t classes, std::uint64_t seed);

  const MlpTrunk& trunk() const { return trunk_; }
  const std::vector<LinearHead>& heads() const { return heads_; }
  std::size_t head_count() const { return heads_.size(); }
  const LinearHead& head(std::size_t index) const;
  NetSpec spec() const;

  // Trunk layers first, then heads in order; weight before bias.
  std::vector<ad::Tensor> parameters() const;
  std::vector<ad::Tensor> trunk_parameters() const;
  std::vector<ad::Tensor> head_parameters(std::size_t head_index) const;
  std::size_t parameter_count() const;

  // Deep copy whose tensors do not require grad. Later training of *this
  // cannot modify the copy.
  MultiHeadNet frozen_copy() const;
  // Deep copy with trainable tensors.
  MultiHeadNet clone() const;

  std::vector<double> flat_parameters() const;
  bool bitwise_equal(const MultiHeadNet& other) const;

 private:
  MultiHeadNet copy(bool trainable) const;

  MlpTrunk trunk_;
  std::vector<LinearHead> heads_;
};

// Checkpoint: JSON {format, version, widths, heads, parameters}.
void save_checkpoint(const MultiHeadNet& net, const std::filesystem::path& path);
MultiHeadNet load_checkpoint(const std::filesystem::path& path, bool trainable = false);
std::string checkpoint_json(const MultiHeadNet& net);
MultiHeadNet checkpoint_from_json(const std::string& text, bool trainable = false);

}  // namespace kdlab::nets
