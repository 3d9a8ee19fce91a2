#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "diffnas/tensor.hpp"

namespace diffnas::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One value in the computation graph. Leaves have no backward function.
struct Node {
  Tensor value;
  std::optional<Tensor> grad;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  /// Reads self.grad and accumulates into parents' grads.
  std::function<void(Node& self)> backward_fn;

  /// Adds g into grad, allocating a zero buffer on first use.
  void accumulate_grad(std::span<const float> g);
  Tensor& grad_buffer();
};

/// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  /// Node that never receives gradients.
  static Var constant(Tensor value);
  /// Leaf node, e.g. a parameter or an input under test.
  static Var leaf(Tensor value, bool requires_grad);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && node_->grad.has_value(); }
  const Tensor& grad() const;
  void zero_grad() { node_->grad.reset(); }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  const NodePtr& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  NodePtr node_;
};

/// True unless a NoGradGuard is live on this thread.
bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Creates the output node of an op. Parents are recorded only when grad
/// mode is on and at least one input requires a gradient.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

/// Reverse-mode sweep from a scalar loss.
void backward(const Var& loss);

}  // namespace diffnas::ad
