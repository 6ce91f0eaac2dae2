#pragma once

#include <cmath>
#include <cstddef>
#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <vector>

#include "poroperm/error.hpp"
#include "poroperm/random.hpp"
#include "poroperm/tensor.hpp"

namespace poroperm {

/// Handle to a node of a Graph.
struct Var {
  std::size_t id = 0;
};

/// Tape for reverse-mode differentiation. Nodes are appended in evaluation
/// order, so reverse insertion order is a valid reverse topological order.
///
/// Parameter nodes borrow their value and write gradients straight into a
/// caller-owned sink, which accumulates across backward passes until the
/// caller clears it.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, Var self)>;

  Var constant(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), nullptr, nullptr, {}, false, {}, false});
    return {nodes_.size() - 1};
  }

  /// `grad_sink` may be null, in which case the gradient stays on the node.
  Var parameter(const Tensor<T>& value, Tensor<T>* grad_sink) {
    if (grad_sink && grad_sink->shape() != value.shape())
      fail(ErrorCode::ShapeMismatch, "gradient sink shape differs from parameter shape");
    nodes_.push_back(Node{{}, &value, grad_sink, {}, true, {}, false});
    return {nodes_.size() - 1};
  }

  /// Appends an operator output. `fn` runs during backward and must add the
  /// node's gradient contributions into those inputs that require grad.
  Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (Var v : inputs) needs = needs || nodes_[v.id].requires_grad;
    nodes_.push_back(Node{std::move(value), nullptr, nullptr, {}, needs, needs ? std::move(fn) : BackwardFn{}, false});
    return {nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.external ? *n.external : n.owned;
  }

  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient accumulator of `v`, allocated as zeros on first use.
  Tensor<T>& grad(Var v) {
    Node& n = nodes_[v.id];
    n.reached = true;
    if (n.sink) return *n.sink;
    if (n.grad.shape() != value(v).shape()) n.grad = Tensor<T>(value(v).shape());
    return n.grad;
  }

  void backward(Var loss) {
    const Tensor<T>& lv = value(loss);
    if (lv.size() != 1) fail(ErrorCode::NonScalarLoss, "loss has shape " + shape_string(lv.shape()));
    if (!std::isfinite(static_cast<double>(lv[0]))) fail(ErrorCode::NonFiniteValue, "loss is not finite");
    if (!requires_grad(loss)) return;
    grad(loss)[0] += T{1};
    // Only nodes that received a gradient (reached from the loss) propagate.
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.reached && n.backward) n.backward(*this, Var{id});
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Records which side of a piecewise kink (e.g. ReLU at 0) an element fell
  /// on. The running signature lets finite-difference checks detect that a
  /// perturbation crossed a kink.
  void note_branch(bool upper) noexcept {
    branch_signature_ = (branch_signature_ ^ (upper ? 0x9e37ULL : 0x7f4aULL)) * 0x100000001b3ULL;
  }
  std::uint64_t branch_signature() const noexcept { return branch_signature_; }

  /// Smallest |input| seen by any kinked operator.
  void note_kink_margin(double m) noexcept { kink_margin_ = std::min(kink_margin_, m); }
  double kink_margin() const noexcept { return kink_margin_; }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T>* sink = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    bool reached = false;
  };

  std::deque<Node> nodes_;
  std::uint64_t branch_signature_ = 0xcbf29ce484222325ULL;
  double kink_margin_ = INFINITY;
};

}  // namespace poroperm
