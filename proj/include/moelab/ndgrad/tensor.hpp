#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace moelab::ndgrad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of the define-by-run computation graph. Leaves are inputs and
// parameters; interior nodes carry a closure that pushes their gradient into
// their parents.
struct Node {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  bool is_leaf() const { return !backward; }
  std::vector<double>& ensure_grad();
};

// Handle to a Node. Copies share the node (reference semantics, like a
// framework tensor); use detach() for an independent value copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  // Row vector [1 x n].
  static Tensor row(std::vector<double> values, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const { return values().size(); }
  // Rank-2 accessors; a rank-1 tensor is viewed as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t i) const { return values()[i]; }
  double at(std::size_t r, std::size_t c) const { return values()[r * cols() + c]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  // Zero-filled span of numel() when no gradient has been accumulated.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  std::uint64_t id() const;
  const char* op() const;
  Tensor detach() const;
  const NodePtr& node() const { return node_; }

  // Reverse-mode sweep from this tensor. The scalar overload seeds with 1.
  void backward() const;
  void backward(std::span<const double> seed) const;

 private:
  NodePtr node_;
};

// Reachable subgraph of a root, in topological order (parents before children).
class Graph {
 public:
  explicit Graph(const Tensor& root);

  std::span<Node* const> order() const { return order_; }
  std::size_t size() const { return order_.size(); }

  // Zeroes interior gradients, seeds the root and visits every node once in
  // reverse topological order. Leaf gradients accumulate across calls.
  void backward(std::span<const double> seed);

 private:
  Tensor root_;
  std::vector<Node*> order_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace detail {
// Wraps a freshly computed value as a graph node. Parents and the backward
// closure are only retained when recording is on and some parent needs grad.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
                   std::function<void(Node&)> backward, const char* op);
}  // namespace detail

}  // namespace moelab::ndgrad
