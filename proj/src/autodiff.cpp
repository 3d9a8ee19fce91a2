#include "diffnas/autodiff.hpp"

#include <unordered_set>

#include "diffnas/error.hpp"

namespace diffnas::ad {

namespace {
thread_local bool t_grad_enabled = true;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor& Node::grad_buffer() {
  if (!grad) grad.emplace(value.shape(), 0.0f);
  return *grad;
}

void Node::accumulate_grad(std::span<const float> g) {
  Tensor& buf = grad_buffer();
  if (g.size() != buf.numel()) throw DimensionError("gradient size mismatch for " + shape_str(value.shape()));
  float* dst = buf.ptr();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

Var Var::constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var Var::leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

const Tensor& Var::grad() const {
  if (!has_grad()) throw ContractError("variable has no gradient");
  return *node_->grad;
}

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (!t_grad_enabled) return Var(std::move(n));
  bool any = false;
  for (const Var& v : inputs) any = any || v.requires_grad();
  if (!any) return Var(std::move(n));
  n->requires_grad = true;
  n->parents.reserve(inputs.size());
  for (Var& v : inputs) n->parents.push_back(v.node());
  n->backward_fn = std::move(backward_fn);
  return Var(std::move(n));
}

void backward(const Var& loss) {
  if (!loss) throw ContractError("backward on empty variable");
  if (loss.value().numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer().fill(1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad) n->backward_fn(*n);
  }
  // Interior grads are no longer needed; leaves keep theirs.
  for (Node* n : order) {
    if (n->backward_fn) n->grad.reset();
  }
}

}  // namespace diffnas::ad
