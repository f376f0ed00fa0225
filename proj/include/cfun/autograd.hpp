#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "cfun/tensor.hpp"

namespace cfun::ag {

/// One value in a reverse-mode computation graph.
///
/// `backward_fn` reads this node's `grad` and accumulates into the parents'
/// grads. Parents never reference children, so the graph is released as soon
/// as the root goes out of scope.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  /// Gradient buffer, zero-initialized on first use.
  Tensor& grad_ref();
  [[nodiscard]] bool has_grad() const { return !grad.empty(); }
};

using Var = std::shared_ptr<Node>;

Var constant(Tensor value);
Var parameter(Tensor value);

/// Creates an op result. If gradients are disabled or no parent requires
/// them, the parents and the backward closure are dropped.
Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

/// Seeds d(root)/d(root) = 1 (root must hold one element) and propagates.
void backward(const Var& root);

[[nodiscard]] bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace cfun::ag
