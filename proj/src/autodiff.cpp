#include "kdlab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace kdlab::ad {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

namespace {

std::shared_ptr<Node> make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape));
  }
  if (shape_size(shape) != values.size()) {
    throw ShapeError("shape " + shape_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

// Output node for an op. Inputs are only retained when a gradient can flow.
std::shared_ptr<Node> make_result(std::string op, Shape shape, std::vector<double> values,
                                  std::initializer_list<const Tensor*> inputs) {
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->shape = std::move(shape);
  node->values = std::move(values);
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const Tensor* t : inputs) node->inputs.push_back(t->node());
  }
  return node;
}

const Node& checked(const Tensor& t, const char* what) {
  if (!t.defined()) throw std::invalid_argument(std::string(what) + ": undefined tensor");
  return *t.node();
}

void require_2d(const Tensor& t, const char* op) {
  if (t.shape().size() != 2) {
    throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_string(t.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <typename F>
Tensor unary(const char* op, const Tensor& x, F&& forward,
             std::function<void(Node& out, Node& in)> back) {
  const Node& in = checked(x, op);
  std::vector<double> out(in.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(in.values[i]);
  auto node = make_result(op, in.shape, std::move(out), {&x});
  if (node->requires_grad) {
    node->backward_fn = [back = std::move(back)](Node& self) {
      Node& input = *self.inputs[0];
      if (!input.requires_grad) return;
      input.ensure_grad();
      back(self, input);
    };
  }
  return Tensor(node);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  return Tensor(make_leaf(std::move(shape), std::move(values), false));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  return Tensor(make_leaf(std::move(shape), std::move(values), true));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_size(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::scalar(double value) { return constant({1}, {value}); }

const Shape& Tensor::shape() const { return checked(*this, "shape").shape; }
std::size_t Tensor::size() const { return checked(*this, "size").values.size(); }

std::size_t Tensor::rows() const {
  require_2d(*this, "rows");
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  require_2d(*this, "cols");
  return node_->shape[1];
}

std::span<const double> Tensor::values() const { return checked(*this, "values").values; }
std::span<double> Tensor::mutable_values() {
  checked(*this, "mutable_values");
  return node_->values;
}

double Tensor::item() const {
  const Node& n = checked(*this, "item");
  if (n.values.size() != 1) {
    throw ShapeError("item() on non-scalar tensor " + shape_string(n.shape));
  }
  return n.values[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  require_2d(*this, "at");
  return node_->values.at(r * node_->shape[1] + c);
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return checked(*this, "is_leaf").is_leaf(); }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return checked(*this, "grad").grad; }

std::span<double> Tensor::mutable_grad() {
  checked(*this, "mutable_grad");
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  checked(*this, "zero_grad");
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return ad::detach(*this); }

const std::string& Tensor::op_name() const { return checked(*this, "op_name").op; }

// ---------------------------------------------------------------------------
// backward

void backward(const Tensor& loss) {
  const Node& root = checked(loss, "backward");
  if (root.values.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_string(root.shape));
  }
  if (!root.requires_grad) return;

  // Iterative post-order DFS: children before parents.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->values.size(), 0.0);
  }
  Node& top = *loss.node();
  top.ensure_grad();
  top.grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

Tensor detach(const Tensor& x) {
  const Node& in = checked(x, "detach");
  return Tensor(make_leaf(in.shape, in.values, false));
}

// ---------------------------------------------------------------------------
// products

Tensor matmul(const Tensor& a, const Tensor& b) {
  checked(a, "matmul");
  checked(b, "matmul");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  auto node = make_result("matmul", {m, n}, std::move(out), {&a, &b});
  if (node->requires_grad) {
    node->backward_fn = [m, k, n](Node& self) {
      Node& A = *self.inputs[0];
      Node& B = *self.inputs[1];
      const auto& g = self.grad;
      if (A.requires_grad) {
        A.ensure_grad();
        // dA = g . B^T
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * B.values[p * n + j];
            A.grad[i * k + p] += acc;
          }
        }
      }
      if (B.requires_grad) {
        B.ensure_grad();
        // dB = A^T . g
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = A.values[i * k + p];
            for (std::size_t j = 0; j < n; ++j) B.grad[p * n + j] += aip * g[i * n + j];
          }
        }
      }
    };
  }
  return Tensor(node);
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  checked(x, "linear");
  checked(weight, "linear");
  checked(bias, "linear");
  if (x.shape().size() != 2 || weight.shape().size() != 2 || x.shape()[1] != weight.shape()[1]) {
    throw ShapeError("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                     shape_string(weight.shape()));
  }
  const std::size_t b = x.shape()[0], in = x.shape()[1], out_dim = weight.shape()[0];
  if (bias.shape() != Shape{out_dim}) {
    throw ShapeError("linear: bias " + shape_string(bias.shape()) + " does not match weight " +
                     shape_string(weight.shape()));
  }
  const auto xv = x.values();
  const auto wv = weight.values();
  const auto bv = bias.values();
  std::vector<double> out(b * out_dim);
  for (std::size_t i = 0; i < b; ++i) {
    const double* xrow = &xv[i * in];
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* wrow = &wv[o * in];
      double acc = bv[o];
      for (std::size_t p = 0; p < in; ++p) acc += xrow[p] * wrow[p];
      out[i * out_dim + o] = acc;
    }
  }
  auto node = make_result("linear", {b, out_dim}, std::move(out), {&x, &weight, &bias});
  if (node->requires_grad) {
    node->backward_fn = [b, in, out_dim](Node& self) {
      Node& X = *self.inputs[0];
      Node& W = *self.inputs[1];
      Node& B = *self.inputs[2];
      const auto& g = self.grad;
      if (X.requires_grad) {
        X.ensure_grad();
        for (std::size_t i = 0; i < b; ++i) {
          double* dx = &X.grad[i * in];
          for (std::size_t o = 0; o < out_dim; ++o) {
            const double gio = g[i * out_dim + o];
            if (gio == 0.0) continue;
            const double* wrow = &W.values[o * in];
            for (std::size_t p = 0; p < in; ++p) dx[p] += gio * wrow[p];
          }
        }
      }
      if (W.requires_grad) {
        W.ensure_grad();
        for (std::size_t i = 0; i < b; ++i) {
          const double* xrow = &X.values[i * in];
          for (std::size_t o = 0; o < out_dim; ++o) {
            const double gio = g[i * out_dim + o];
            if (gio == 0.0) continue;
            double* dw = &W.grad[o * in];
            for (std::size_t p = 0; p < in; ++p) dw[p] += gio * xrow[p];
          }
        }
      }
      if (B.requires_grad) {
        B.ensure_grad();
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t o = 0; o < out_dim; ++o) B.grad[o] += g[i * out_dim + o];
        }
      }
    };
  }
  return Tensor(node);
}

// ---------------------------------------------------------------------------
// elementwise

namespace {

template <typename Fwd, typename Back>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd&& forward, Back&& back) {
  checked(a, op);
  checked(b, op);
  require_same(a, b, op);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(av[i], bv[i]);
  auto node = make_result(op, a.shape(), std::move(out), {&a, &b});
  if (node->requires_grad) {
    node->backward_fn = [back](Node& self) {
      Node& A = *self.inputs[0];
      Node& B = *self.inputs[1];
      if (A.requires_grad) A.ensure_grad();
      if (B.requires_grad) B.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double g = self.grad[i];
        const auto [da, db] = back(g, A.values[i], B.values[i]);
        if (A.requires_grad) A.grad[i] += da;
        if (B.requires_grad) B.grad[i] += db;
      }
    };
  }
  return Tensor(node);
}

struct Pair {
  double first;
  double second;
};

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return Pair{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return Pair{g, -g}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y) { return Pair{g * y, g * x}; });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  checked(x, "add_bias");
  checked(bias, "add_bias");
  require_2d(x, "add_bias");
  const std::size_t b = x.shape()[0], n = x.shape()[1];
  if (bias.shape() != Shape{n}) {
    throw ShapeError("add_bias: bias " + shape_string(bias.shape()) + " does not match rows of " +
                     shape_string(x.shape()));
  }
  const auto xv = x.values();
  const auto bv = bias.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] + bv[j];
  }
  auto node = make_result("add_bias", x.shape(), std::move(out), {&x, &bias});
  if (node->requires_grad) {
    node->backward_fn = [b, n](Node& self) {
      Node& X = *self.inputs[0];
      Node& B = *self.inputs[1];
      if (X.requires_grad) {
        X.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) X.grad[i] += self.grad[i];
      }
      if (B.requires_grad) {
        B.ensure_grad();
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t j = 0; j < n; ++j) B.grad[j] += self.grad[i * n + j];
        }
      }
    };
  }
  return Tensor(node);
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      "scale", x, [factor](double v) { return v * factor; },
      [factor](Node& self, Node& in) {
        for (std::size_t i = 0; i < in.grad.size(); ++i) in.grad[i] += factor * self.grad[i];
      });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](Node& self, Node& in) {
        // Subgradient at 0 is 0.
        for (std::size_t i = 0; i < in.grad.size(); ++i) {
          if (in.values[i] > 0.0) in.grad[i] += self.grad[i];
        }
      });
}

Tensor square(const Tensor& x) {
  return unary(
      "square", x, [](double v) { return v * v; },
      [](Node& self, Node& in) {
        for (std::size_t i = 0; i < in.grad.size(); ++i) {
          in.grad[i] += 2.0 * in.values[i] * self.grad[i];
        }
      });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& x) {
  const Node& in = checked(x, "sum");
  double acc = 0.0;
  for (double v : in.values) acc += v;
  auto node = make_result("sum", {1}, {acc}, {&x});
  if (node->requires_grad) {
    node->backward_fn = [](Node& self) {
      Node& X = *self.inputs[0];
      X.ensure_grad();
      const double g = self.grad[0];
      for (auto& v : X.grad) v += g;
    };
  }
  return Tensor(node);
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

// ---------------------------------------------------------------------------
// row-wise

Tensor log_softmax(const Tensor& x) {
  checked(x, "log_softmax");
  require_2d(x, "log_softmax");
  const std::size_t b = x.shape()[0], k = x.shape()[1];
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = &xv[i * k];
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = row[j] - lse;
  }
  auto node = make_result("log_softmax", x.shape(), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward_fn = [b, k](Node& self) {
      Node& X = *self.inputs[0];
      X.ensure_grad();
      // dx = g - softmax * sum(g)
      for (std::size_t i = 0; i < b; ++i) {
        double gs = 0.0;
        for (std::size_t j = 0; j < k; ++j) gs += self.grad[i * k + j];
        for (std::size_t j = 0; j < k; ++j) {
          const double p = std::exp(self.values[i * k + j]);
          X.grad[i * k + j] += self.grad[i * k + j] - p * gs;
        }
      }
    };
  }
  return Tensor(node);
}

Tensor softmax(const Tensor& x) {
  checked(x, "softmax");
  require_2d(x, "softmax");
  const std::size_t b = x.shape()[0], k = x.shape()[1];
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = &xv[i * k];
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      out[i * k + j] = std::exp(row[j] - mx);
      z += out[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] /= z;
  }
  auto node = make_result("softmax", x.shape(), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward_fn = [b, k](Node& self) {
      Node& X = *self.inputs[0];
      X.ensure_grad();
      // dx = p * (g - <g, p>)
      for (std::size_t i = 0; i < b; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) dot += self.grad[i * k + j] * self.values[i * k + j];
        for (std::size_t j = 0; j < k; ++j) {
          X.grad[i * k + j] += self.values[i * k + j] * (self.grad[i * k + j] - dot);
        }
      }
    };
  }
  return Tensor(node);
}

Tensor normalize_rows(const Tensor& x, double eps) {
  checked(x, "normalize_rows");
  require_2d(x, "normalize_rows");
  const std::size_t b = x.shape()[0], n = x.shape()[1];
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  std::vector<double> denom(b);
  std::vector<char> clamped(b);
  for (std::size_t i = 0; i < b; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += xv[i * n + j] * xv[i * n + j];
    const double norm = std::sqrt(ss);
    clamped[i] = norm <= eps;
    denom[i] = clamped[i] ? eps : norm;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] / denom[i];
  }
  auto node = make_result("normalize_rows", x.shape(), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward_fn = [b, n, denom = std::move(denom), clamped = std::move(clamped)](Node& self) {
      Node& X = *self.inputs[0];
      X.ensure_grad();
      for (std::size_t i = 0; i < b; ++i) {
        const double* y = &self.values[i * n];
        const double* g = &self.grad[i * n];
        double* dx = &X.grad[i * n];
        if (clamped[i]) {
          for (std::size_t j = 0; j < n; ++j) dx[j] += g[j] / denom[i];
          continue;
        }
        // dx = (g - y <y, g>) / ||x||
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
        for (std::size_t j = 0; j < n; ++j) dx[j] += (g[j] - y[j] * dot) / denom[i];
      }
    };
  }
  return Tensor(node);
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  checked(logits, "softmax_cross_entropy");
  require_2d(logits, "softmax_cross_entropy");
  const std::size_t b = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != b) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for logits " + shape_string(logits.shape()));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) +
                              " outside [0, " + std::to_string(k) + ")");
    }
  }
  const auto lv = logits.values();
  std::vector<double> probs(lv.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = &lv[i * k];
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(row[j] - mx);
      z += probs[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= z;
    loss += mx + std::log(z) - row[labels[i]];
  }
  loss /= static_cast<double>(b);
  auto node = make_result("softmax_cross_entropy", {1}, {loss}, {&logits});
  if (node->requires_grad) {
    std::vector<int> saved(labels.begin(), labels.end());
    node->backward_fn = [b, k, probs = std::move(probs), saved = std::move(saved)](Node& self) {
      Node& L = *self.inputs[0];
      L.ensure_grad();
      const double g = self.grad[0] / static_cast<double>(b);
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          const double onehot = static_cast<std::size_t>(saved[i]) == j ? 1.0 : 0.0;
          L.grad[i * k + j] += g * (probs[i * k + j] - onehot);
        }
      }
    };
  }
  return Tensor(node);
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> indices) {
  checked(x, "select_rows");
  require_2d(x, "select_rows");
  const std::size_t rows = x.shape()[0], n = x.shape()[1];
  if (indices.empty()) throw ShapeError("select_rows: empty index list");
  const auto xv = x.values();
  std::vector<double> out(indices.size() * n);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows) {
      throw std::out_of_range("select_rows: row " + std::to_string(indices[r]) + " of " +
                              shape_string(x.shape()));
    }
    std::copy_n(&xv[indices[r] * n], n, &out[r * n]);
  }
  auto node = make_result("select_rows", {indices.size(), n}, std::move(out), {&x});
  if (node->requires_grad) {
    std::vector<std::size_t> saved(indices.begin(), indices.end());
    node->backward_fn = [n, saved = std::move(saved)](Node& self) {
      Node& X = *self.inputs[0];
      X.ensure_grad();
      for (std::size_t r = 0; r < saved.size(); ++r) {
        for (std::size_t j = 0; j < n; ++j) X.grad[saved[r] * n + j] += self.grad[r * n + j];
      }
    };
  }
  return Tensor(node);
}

}  // namespace kdlab::ad
