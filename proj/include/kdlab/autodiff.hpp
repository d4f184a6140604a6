#pragma once

// Minimal reverse-mode automatic differentiation over dense double arrays.
//
// A Tensor is a cheap handle to a graph node. Every op records its inputs and
// a backward rule on the output node, so the graph reachable from a loss is
// the tape for that loss. backward() walks it in reverse topological order.
// There is no global tape: graphs built on different threads never share
// state unless they share parameter tensors.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kdlab::ad {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Node;

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor parameter(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rows() const;  // shape[0]; 2-D tensors only
  std::size_t cols() const;  // shape[1]; 2-D tensors only

  std::span<const double> values() const;
  // Writable view for optimizers and initializers. Mutating a tensor that is
  // still referenced by a live graph invalidates that graph's backward.
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  // Empty span until a backward pass has reached this tensor.
  std::span<const double> grad() const;
  // Writable gradient, allocated as zeros if absent. For optimizers that add
  // analytic terms after backward().
  std::span<double> mutable_grad();
  void zero_grad();

  // Value-equal tensor cut out of the graph. The values are copied, so later
  // in-place updates to *this do not leak into the detached copy.
  Tensor detach() const;

  const std::string& op_name() const;

  // Internal: used by op implementations.
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into the grads of `inputs`.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return inputs.empty(); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
// Leaf gradients accumulate across calls until zero_grad(); intermediate
// gradients are reset at the start of every call.
void backward(const Tensor& loss);

Tensor detach(const Tensor& x);

// a[m x k] . b[k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// x[b x in] . weight[out x in]^T + bias[out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// x[b x n] + bias[n], broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double factor);

Tensor relu(const Tensor& x);
Tensor square(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Row-wise ops on [b x k].
Tensor log_softmax(const Tensor& x);
Tensor softmax(const Tensor& x);
// x / max(||x||_2, eps) per row.
Tensor normalize_rows(const Tensor& x, double eps = 1e-12);

// Mean over rows of -log softmax(logits)[label].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

// Rows of x at the given indices, in order.
Tensor select_rows(const Tensor& x, std::span<const std::size_t> indices);

}  // namespace kdlab::ad
